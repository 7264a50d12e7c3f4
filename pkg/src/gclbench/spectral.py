"""Singular-value machinery: thin SVD, spectrum stats, the contrastive-loss
upper bound, the rank-1 dispersion objective, and rank-k reconstruction errors.

Everything here is a pure function of its inputs (plus an explicit seed), in
64-bit floats throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalError


@dataclass
class SpectralDecomposition:
    """Thin SVD Z = left @ diag(singular_values) @ right.T.

    Columns of left/right are orthonormal, singular values descending. The
    sign convention (first nonzero entry of each left vector positive) makes
    decompositions comparable across runs.
    """

    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray
    k: int


def svd(Z: np.ndarray, k: int | None = None) -> SpectralDecomposition:
    """Thin SVD of Z, optionally truncated to the top-k components.

    Direct bidiagonalization on Z itself; the Gram-matrix eigensolver is kept
    as an independent test oracle and never used here.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise NumericalError("svd input contains non-finite values")
    full = min(Z.shape)
    if k is None:
        k = full
    if k > full:
        raise ConfigError(f"rank {k} exceeds min(dims)={full}")
    left, sigma, right_t = np.linalg.svd(Z, full_matrices=False)
    left, sigma, right = left[:, :k], sigma[:k], right_t[:k].T
    # fix signs: first nonzero entry of each left vector positive
    for j in range(k):
        col = left[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if len(nz) and col[nz[0]] < 0:
            left[:, j] = -col
            right[:, j] = -right[:, j]
    return SpectralDecomposition(left=left, singular_values=sigma,
                                 right=right, k=k)


def spectrum_report(Z: np.ndarray) -> dict:
    """Descending singular spectrum with concentration summary stats.

    Effective rank is exp(entropy) of the normalized spectrum, so a rank-1
    matrix scores 1 and an all-equal spectrum of length n scores n.
    """
    sigma = svd(Z).singular_values
    total = float(sigma.sum())
    if total == 0.0:
        top_share, eff_rank = 0.0, 0.0
    else:
        p = sigma / total
        nz = p[p > 0]
        eff_rank = float(np.exp(-(nz * np.log(nz)).sum()))
        top_share = float(sigma[0] / total)
    report = {
        "singular_values": sigma,
        "top_share": top_share,
        "effective_rank": eff_rank,
    }
    if len(sigma) >= 10 and sigma[9] > 0:
        report["sigma1_over_sigma10"] = float(sigma[0] / sigma[9])
    return report


def write_spectrum_csv(sigma: np.ndarray, path, config_hash: str = "") -> None:
    """CSV of "rank,sigma" rows, descending."""
    with Path(path).open("w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("rank,sigma\n")
        for r, s in enumerate(sigma, start=1):
            fh.write(f"{r},{s!r}\n")


def gcl_upper_bound(sigma1, sigma2, n_nodes: int) -> float:
    """Upper bound on the contrastive loss of two views with shared singular
    vectors: N * max_j(s'_j s''_j) - sum_i s'_i s''_i + N log N."""
    sigma1 = np.asarray(sigma1, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if sigma1.shape != sigma2.shape:
        raise ConfigError("singular value lists differ in length")
    if n_nodes < 1:
        raise ConfigError("need at least one node")
    prod = sigma1 * sigma2
    return float(n_nodes * prod.max() - prod.sum() + n_nodes * np.log(n_nodes))


@dataclass
class DispersionState:
    """Probe vector, its data-dependent image, and the deflated matrix."""

    probe: np.ndarray        # V, the random direction
    image: np.ndarray        # V' = Z^T Z V
    approx: np.ndarray       # Z with the V' direction removed


def dispersion_loss(Z: np.ndarray, seed: int, norm: str = "l1",
                    _probe: np.ndarray | None = None):
    """Rank-1 dispersion objective and its analytic gradient.

    A fresh probe V ~ N(0, I_d) is drawn per call; V' = Z^T Z V concentrates
    toward the dominant right-singular directions. With w = V' and c = ||w||^2,

        loss = -|| Z w w^T || / c

    where ||.|| is entrywise L1 by default ("fro" selects Frobenius). The
    loss is the negated distance between Z and its deflated version, so the
    spectral-flattening direction is ASCENT on this value (equivalently,
    gradient descent on the distance form): it compresses the dominant
    singular directions, which the probe construction favors, faster than
    the small ones. The deflated matrix approx = Z - Z w w^T / c satisfies
    approx @ w = 0 exactly.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.size == 0 or not np.any(Z):
        raise NumericalError("dispersion loss needs a nonzero matrix")
    d = Z.shape[1]
    rng = np.random.default_rng(seed)
    w = None
    for _ in range(8):
        v = _probe if _probe is not None else rng.standard_normal(d)
        w = Z.T @ (Z @ v)
        if np.linalg.norm(w) > 1e-12:
            break
        if _probe is not None:
            raise NumericalError("supplied probe is annihilated by Z")
        w = None
    if w is None:
        raise NumericalError("probe annihilated by Z after 8 resamples")

    c = float(w @ w)
    Zw = Z @ w                       # (n,)
    M = np.outer(Zw, w)              # Z w w^T
    if norm == "l1":
        num = float(np.abs(M).sum())
        S = np.sign(M)
    elif norm == "fro":
        num = float(np.linalg.norm(M))
        S = M / num if num > 0 else np.zeros_like(M)
    else:
        raise ConfigError(f"unknown norm: {norm}")

    # d(num) assembled from dM = dZ w w^T + Z dw w^T + Z w dw^T,
    # with dw = dZ^T Z v + Z^T dZ v
    a = Z.T @ (S @ w)                # (d,)
    b = S.T @ Zw                     # (d,)
    ab = a + b
    Zv = Z @ v
    grad_num = np.outer(S @ w, w) + np.outer(Zv, ab) + np.outer(Z @ ab, v)
    grad_c = 2.0 * (np.outer(Zv, w) + np.outer(Z @ w, v))

    loss = -num / c
    grad = -(grad_num * c - num * grad_c) / (c * c)
    approx = Z - M / c
    return loss, grad, DispersionState(probe=np.asarray(v, dtype=np.float64),
                                       image=w, approx=approx)


def reconstruction_errors(Z: np.ndarray, k: int) -> np.ndarray:
    """Per-row L2 residual after projecting onto the top-k right-singular
    subspace: row i of Z - L_k S_k R_k^T."""
    Z = np.asarray(Z, dtype=np.float64)
    full = min(Z.shape)
    if not 1 <= k < full:
        raise ConfigError(f"rank k={k} must satisfy 1 <= k < {full}")
    dec = svd(Z, k)
    resid = Z - (dec.left * dec.singular_values) @ dec.right.T
    return np.linalg.norm(resid, axis=1)


def write_reconstruction_csv(errors: np.ndarray, item_ids, path,
                             config_hash: str = "") -> None:
    """CSV of "item_id,epsilon" rows using original string ids."""
    with Path(path).open("w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("item_id,epsilon\n")
        for iid, e in zip(item_ids, errors):
            fh.write(f"{iid},{e!r}\n")
