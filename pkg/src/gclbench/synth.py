"""Seeded synthetic bipartite graphs: power-law item popularity, lognormal
user activity. The desk-scale stand-in for public rating datasets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .graphs import InteractionGraph


@dataclass(frozen=True)
class SyntheticSpec:
    users: int = 500
    items: int = 800
    exponent: float = 1.2       # item popularity ~ rank^(-exponent)
    density: float = 0.025
    seed: int = 0
    degree_sigma: float = 0.6   # lognormal spread of user activity
    groups: int = 8             # latent taste clusters; 1 disables
    affinity: float = 4.0       # in-group item weight multiplier
    global_share: float = 0.05  # top items boosted for every group (global hits)


def generate_synthetic(spec: SyntheticSpec) -> InteractionGraph:
    """Sample a graph matching the spec; all edges start in the train split.

    Item 0 is the most popular by construction. Per-user degrees are lognormal
    draws rescaled so the total edge count tracks users * items * density,
    clamped to [1, items]. Items are drawn per user without replacement from
    the popularity law, reweighted toward the user's latent taste group so
    that co-preference structure exists for embeddings to capture.
    """
    if spec.users < 10 or spec.items < 10:
        raise ConfigError("need at least 10 users and 10 items")
    if spec.exponent <= 0:
        raise ConfigError("exponent must be positive")
    if not 0 < spec.density < 1:
        raise ConfigError("density must be in (0, 1)")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5F]))
    weights = (np.arange(1, spec.items + 1, dtype=np.float64)) ** (-spec.exponent)
    weights /= weights.sum()

    target_edges = spec.users * spec.items * spec.density
    raw = rng.lognormal(mean=0.0, sigma=spec.degree_sigma, size=spec.users)
    degrees = np.clip(np.rint(raw * target_edges / raw.sum()).astype(int),
                      1, spec.items)

    n_groups = max(1, spec.groups)
    user_group = rng.integers(0, n_groups, size=spec.users)
    item_group = rng.integers(0, n_groups, size=spec.items)
    # the head of the popularity law is boosted for everyone, so cold-taste
    # profiles still co-occur with the hits, as in real interaction data
    n_global = int(np.ceil(spec.global_share * spec.items))
    is_global = np.arange(spec.items) < n_global

    edges_u, edges_i = [], []
    for u in range(spec.users):
        boost = (item_group == user_group[u]) | is_global
        w = weights * np.where(boost, spec.affinity, 1.0)
        w /= w.sum()
        items = rng.choice(spec.items, size=degrees[u], replace=False, p=w)
        edges_u.extend([u] * len(items))
        edges_i.extend(int(i) for i in items)

    edges_u = np.array(edges_u, dtype=np.int64)
    edges_i = np.array(edges_i, dtype=np.int64)
    return InteractionGraph(
        num_users=spec.users,
        num_items=spec.items,
        edges_u=edges_u,
        edges_i=edges_i,
        split=np.zeros(len(edges_u), dtype=np.uint8),
        user_ids=[f"u{k}" for k in range(spec.users)],
        item_ids=[f"i{k}" for k in range(spec.items)],
    )
