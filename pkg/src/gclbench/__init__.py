"""Desk-scale workbench for graph-contrastive recommenders: training,
targeted-promotion attacks, and spectral anomaly defense."""

__version__ = "0.1.0"
