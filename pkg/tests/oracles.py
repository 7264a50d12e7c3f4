"""Independent oracles for the test suite.

Everything here is deliberately written the slow, obvious way (loops,
exhaustive enumeration, textbook formulas) and never shares code with the
implementations it checks.
"""

import numpy as np


def central_diff(f, X, eps=1e-6):
    """Central finite-difference gradient of scalar f at matrix/vector X."""
    X = np.asarray(X, dtype=np.float64)
    grad = np.zeros_like(X)
    it = np.nditer(X, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = X.copy()
        plus[idx] += eps
        minus = X.copy()
        minus[idx] -= eps
        grad[idx] = (f(plus) - f(minus)) / (2 * eps)
    return grad


def rel_err(a, b):
    denom = max(np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def gram_singular_values(Z):
    """Singular values via the Gram-matrix eigensolver (independent route)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[0] >= Z.shape[1]:
        gram = Z.T @ Z
    else:
        gram = Z @ Z.T
    eigvals = np.linalg.eigh(gram)[0]
    return np.sqrt(np.clip(eigvals, 0.0, None))[::-1]


def gram_topk_projection_errors(Z, k):
    """Row residual norms after projecting onto the top-k eigenvectors of Z^T Z."""
    Z = np.asarray(Z, dtype=np.float64)
    eigvals, eigvecs = np.linalg.eigh(Z.T @ Z)
    top = eigvecs[:, np.argsort(eigvals)[::-1][:k]]
    resid = Z - (Z @ top) @ top.T
    return np.linalg.norm(resid, axis=1)


def brute_force_top_k(user_vec, item_mat, k, excluded):
    """All-items sort with explicit (score desc, index asc) ordering."""
    scored = []
    for i in range(item_mat.shape[0]):
        if i in excluded:
            continue
        scored.append((-float(user_vec @ item_mat[i]), i))
    scored.sort()
    return [i for _, i in scored[:k]]


def brute_force_recall(user_final, item_final, k, train_items, held_items,
                       users):
    """Textbook recall over users with nonempty held-out sets."""
    vals = []
    for u in users:
        held = set(held_items[u])
        if not held:
            continue
        top = brute_force_top_k(user_final[u], item_final, k,
                                set(train_items[u]))
        vals.append(len(held.intersection(top)) / len(held))
    return sum(vals) / len(vals)


def brute_force_hit_ratio(user_final, item_final, k, train_items, targets,
                          users, any_variant=False):
    hits = 0
    for u in users:
        top = set(brute_force_top_k(user_final[u], item_final, k,
                                    set(train_items[u])))
        present = [t for t in targets if t in top]
        hits += bool(present) if any_variant else len(present)
    denom = len(users) if any_variant else len(users) * len(targets)
    return hits / denom


def hadamard(n):
    """Sylvester Hadamard matrix; n must be a power of two."""
    H = np.array([[1.0]])
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H


def shared_factor_views(n_nodes, d, rng):
    """Two view matrices with unit rows, shared singular vectors, and
    prescribed spectra; n_nodes must be a power of two.

    Rows of H/sqrt(n) all have entries of magnitude 1/sqrt(n), so scaling the
    spectra to ||sigma||^2 = n makes every row exactly unit norm while keeping
    the singular values intact.
    """
    R = hadamard(n_nodes)[:, :d] / np.sqrt(n_nodes)
    L, _ = np.linalg.qr(rng.standard_normal((d, d)))
    spectra = []
    for _ in range(2):
        s = np.sort(rng.random(d))[::-1] + 1e-3
        s *= np.sqrt(n_nodes / (s * s).sum())
        spectra.append(s)
    W1 = (R * spectra[0]) @ L.T
    W2 = (R * spectra[1]) @ L.T
    return W1, W2, spectra[0], spectra[1]
