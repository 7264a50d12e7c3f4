"""Embedding training: mean-of-layers graph propagation, pairwise ranking loss,
contrastive loss over two augmented views, and the joint optimization loop.

All gradients are computed analytically in closed form (the finite-difference
suite in the tests is the oracle for every one of them). Everything runs in
float64; serial execution is the reference for determinism.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import ConfigError, NumericalError
from .graphs import TRAIN, VAL, InteractionGraph, NormalizedAdjacency, normalized_adjacency

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 0.001
    epochs: int = 50
    optimizer: str = "adam"          # "adam" or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    d: int = 128
    layers: int = 3
    temperature: float = 0.2         # tau; chosen default, not dataset-tuned
    contrastive_weight: float = 0.1  # omega; chosen default
    augmentation: str = "embedding_noise"   # or "edge_dropout"
    edge_dropout_rate: float = 0.1
    noise_magnitude: float = 0.1
    l2_weight: float = 1e-4
    eval_k: int = 50
    patience: int | None = 10        # early stop on val recall plateau; None disables
    init_target_norm: float = 1.3    # rescale init so propagated rows start near
                                     # this norm; 0 disables the rescale

    def validate(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer: {self.optimizer}")
        if self.augmentation not in ("embedding_noise", "edge_dropout"):
            raise ConfigError(f"unknown augmentation: {self.augmentation}")
        if not 0.0 <= self.edge_dropout_rate < 1.0:
            raise ConfigError("edge_dropout_rate must be in [0, 1)")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.contrastive_weight < 0:
            raise ConfigError("contrastive_weight must be nonnegative")


@dataclass(eq=False)
class EmbeddingModel:
    """User/item embedding tables plus the training configuration.

    user_base/item_base are the free parameters; user_final/item_final hold
    the propagated embeddings used for scoring, refreshed by the trainer.
    """

    user_base: np.ndarray
    item_base: np.ndarray
    config: TrainConfig
    user_final: np.ndarray | None = None
    item_final: np.ndarray | None = None

    @property
    def num_users(self):
        return self.user_base.shape[0]

    @property
    def num_items(self):
        return self.item_base.shape[0]

    def stacked_base(self) -> np.ndarray:
        return np.vstack([self.user_base, self.item_base])

    def set_final(self, prop: np.ndarray) -> None:
        self.user_final = prop[:self.num_users].copy()
        self.item_final = prop[self.num_users:].copy()


def init_model(num_users: int, num_items: int, config: TrainConfig) -> EmbeddingModel:
    """Uniform init on [-1/sqrt(d), 1/sqrt(d)], seeded."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE]))
    scale = 1.0 / np.sqrt(config.d)
    u = (rng.random((num_users, config.d)) * 2 - 1) * scale
    i = (rng.random((num_items, config.d)) * 2 - 1) * scale
    return EmbeddingModel(user_base=u, item_base=i, config=config)


def propagate_matrix(Z: np.ndarray, adj: sp.csr_matrix, layers: int) -> np.ndarray:
    """Mean over l = 0..layers of adj^l @ Z."""
    acc = Z.copy()
    cur = Z
    for _ in range(layers):
        cur = adj @ cur
        acc += cur
    return acc / (layers + 1)


def propagate(model: EmbeddingModel, adjacency: NormalizedAdjacency) -> np.ndarray:
    """Propagated embeddings, users stacked above items."""
    Z = model.stacked_base()
    if adjacency.num_nodes != Z.shape[0]:
        raise ConfigError(
            f"adjacency has {adjacency.num_nodes} nodes, model has {Z.shape[0]}")
    return propagate_matrix(Z, adjacency.matrix, model.config.layers)


# the propagation operator is symmetric, so backprop applies the same map
backpropagate_matrix = propagate_matrix


def bpr_loss(prop: np.ndarray, triples: np.ndarray, num_users: int):
    """Pairwise ranking loss -mean log sigmoid(z_u . z_i - z_u . z_j).

    triples is (B, 3) of (user, positive item, negative item) with item
    indices in item space. Returns the loss and its gradient with respect to
    the propagated embedding matrix; chain through backpropagate_matrix to
    reach the base tables.
    """
    triples = np.asarray(triples)
    if triples.size == 0:
        raise ConfigError("empty triple batch")
    u = triples[:, 0]
    i = triples[:, 1] + num_users
    j = triples[:, 2] + num_users
    zu, zi, zj = prop[u], prop[i], prop[j]
    s = np.einsum("bd,bd->b", zu, zi - zj)
    loss = float(np.mean(np.logaddexp(0.0, -s)))   # -log sigmoid(s), stable
    coeff = (-expit(-s) / len(s))[:, None]
    grad = np.zeros_like(prop)
    np.add.at(grad, u, coeff * (zi - zj))
    np.add.at(grad, i, coeff * zu)
    np.add.at(grad, j, -coeff * zu)
    return loss, grad


def info_nce_loss(view1: np.ndarray, view2: np.ndarray, tau: float,
                  node_subset: np.ndarray):
    """Contrastive loss over a node subset, negatives drawn from the subset.

    Rows are L2-normalized internally; the returned gradients are with
    respect to the unnormalized inputs (full matrix shape, zero outside the
    subset) and include the normalization Jacobian. The loss is the sum over
    subset nodes, so identical views of n nodes at tau = 1 give n * log n.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    idx = np.asarray(node_subset)
    a1, a2 = view1[idx], view2[idx]
    n1 = np.linalg.norm(a1, axis=1)
    n2 = np.linalg.norm(a2, axis=1)
    for name, n in (("first", n1), ("second", n2)):
        bad = np.flatnonzero(n == 0)
        if len(bad):
            raise NumericalError(
                f"zero-norm row in {name} view at node {idx[bad[0]]}")
    b1 = a1 / n1[:, None]
    b2 = a2 / n2[:, None]
    S = (b1 @ b2.T) / tau
    m = S.shape[0]
    row_max = S.max(axis=1, keepdims=True)
    lse = row_max.ravel() + np.log(np.exp(S - row_max).sum(axis=1))
    loss = float(np.sum(lse - np.diag(S)))
    P = np.exp(S - lse[:, None])                   # row softmax
    D = P - np.eye(m)
    g_b1 = (D @ b2) / tau
    g_b2 = (D.T @ b1) / tau
    # through the normalization Jacobian: (g - (g.b) b) / ||a||
    g_a1 = (g_b1 - (np.einsum("bd,bd->b", g_b1, b1))[:, None] * b1) / n1[:, None]
    g_a2 = (g_b2 - (np.einsum("bd,bd->b", g_b2, b2))[:, None] * b2) / n2[:, None]
    grad1 = np.zeros_like(view1)
    grad2 = np.zeros_like(view2)
    grad1[idx] = g_a1
    grad2[idx] = g_a2
    return loss, grad1, grad2


@dataclass
class ViewPair:
    """Two augmented propagated views plus what backprop needs."""

    z1: np.ndarray
    z2: np.ndarray
    adj1: sp.csr_matrix | None = None   # edge-dropout operators; None for noise mode
    adj2: sp.csr_matrix | None = None


def _dropout_adjacency(adjacency: NormalizedAdjacency, rho: float,
                       rng: np.random.Generator) -> sp.csr_matrix:
    """Renormalized adjacency after dropping each train edge with prob rho."""
    block = adjacency.matrix[:adjacency.num_users, adjacency.num_users:].tocoo()
    keep = rng.random(block.nnz) >= rho
    u, i = block.row[keep], block.col[keep] + adjacency.num_users
    n = adjacency.num_nodes
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv_sqrt)
    return (d @ adj @ d).tocsr()


def make_views(model: EmbeddingModel, adjacency: NormalizedAdjacency,
               mode: str, seed: int) -> ViewPair:
    """Build two contrastive views, deterministic per seed.

    edge_dropout: propagate through two independently subsampled adjacencies.
    embedding_noise: one clean propagation plus a sign-consistent uniform
    perturbation of magnitude noise_magnitude per row on the second view.
    """
    cfg = model.config
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    if mode == "edge_dropout":
        if not 0.0 <= cfg.edge_dropout_rate < 1.0:
            raise ConfigError("edge_dropout_rate must be in [0, 1)")
        adj1 = _dropout_adjacency(adjacency, cfg.edge_dropout_rate, rng)
        adj2 = _dropout_adjacency(adjacency, cfg.edge_dropout_rate, rng)
        Z = model.stacked_base()
        return ViewPair(z1=propagate_matrix(Z, adj1, cfg.layers),
                        z2=propagate_matrix(Z, adj2, cfg.layers),
                        adj1=adj1, adj2=adj2)
    if mode == "embedding_noise":
        prop = propagate(model, adjacency)
        u = rng.random(prop.shape)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        noise = cfg.noise_magnitude * u * np.sign(prop)
        return ViewPair(z1=prop, z2=prop + noise)
    raise ConfigError(f"unknown augmentation mode: {mode}")


class _Optimizer:
    def __init__(self, cfg: TrainConfig, shape):
        self.cfg = cfg
        if cfg.optimizer == "adam":
            self.m = np.zeros(shape)
            self.v = np.zeros(shape)
            self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            params -= cfg.learning_rate * grad
            return
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        params -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def joint_step(model: EmbeddingModel, adjacency: NormalizedAdjacency,
               batch: np.ndarray, config: TrainConfig, opt: _Optimizer,
               view_seed: int, extra_prop_loss=None):
    """One optimizer step on L_rec + omega * L_gcl (+ L2).

    The contrastive term is normalized by the node-subset size so that omega
    is batch-size independent (the raw op returns the summed loss). Reported
    losses are the pre-step values. ``extra_prop_loss`` may add a term
    computed on the propagated embeddings (used by the defense).
    """
    cfg = config
    base = model.stacked_base()
    prop = propagate_matrix(base, adjacency.matrix, cfg.layers)
    l_rec, g_prop = bpr_loss(prop, batch, model.num_users)

    l_extra = 0.0
    if extra_prop_loss is not None:
        extra = extra_prop_loss(prop)
        if extra is not None:
            l_extra, g_extra = extra
            g_prop = g_prop + g_extra

    l_gcl = 0.0
    g_base = backpropagate_matrix(g_prop, adjacency.matrix, cfg.layers)
    if cfg.contrastive_weight > 0:
        views = make_views(model, adjacency, cfg.augmentation, view_seed)
        subset = np.unique(np.concatenate([batch[:, 0],
                                           batch[:, 1] + model.num_users]))
        l_sum, g1, g2 = info_nce_loss(views.z1, views.z2, cfg.temperature, subset)
        l_gcl = l_sum / len(subset)
        w = cfg.contrastive_weight / len(subset)
        if views.adj1 is not None:
            g_base += w * backpropagate_matrix(g1, views.adj1, cfg.layers)
            g_base += w * backpropagate_matrix(g2, views.adj2, cfg.layers)
        else:
            g_base += w * backpropagate_matrix(g1 + g2, adjacency.matrix, cfg.layers)

    l2 = cfg.l2_weight * float(np.sum(base * base))
    g_base += 2.0 * cfg.l2_weight * base
    total = l_rec + cfg.contrastive_weight * l_gcl + l2 + l_extra
    if not np.isfinite(total):
        raise NumericalError(
            f"non-finite loss: rec={l_rec} gcl={l_gcl} l2={l2} extra={l_extra}")

    stacked = base
    opt.step(stacked, g_base)
    model.user_base = stacked[:model.num_users]
    model.item_base = stacked[model.num_users:]
    return l_rec, l_gcl, total


def sample_negatives(graph: InteractionGraph, users: np.ndarray,
                     rng: np.random.Generator) -> np.ndarray:
    """One uniform negative per user draw, rejecting any interacted item."""
    mat = graph.interaction_matrix(None)
    neg = rng.integers(0, graph.num_items, size=len(users))
    for _ in range(1000):
        hit = np.asarray(mat[users, neg]).ravel() > 0
        if not hit.any():
            return neg
        neg[hit] = rng.integers(0, graph.num_items, size=int(hit.sum()))
    raise NumericalError("negative sampling failed; graph too dense")


def train(graph: InteractionGraph, config: TrainConfig, *,
          adjacency: NormalizedAdjacency | None = None,
          extra_prop_loss=None, epoch_end=None, log_path=None):
    """Run the joint training loop; returns (model, per-epoch log rows).

    Negatives are resampled each epoch. Early stopping watches the validation
    recall plateau when patience is set. ``epoch_end(model, prop, epoch, row)``
    fires after each epoch (defense hooks in here); ``extra_prop_loss`` is
    forwarded to every step.
    """
    from . import evaluate  # local import: evaluate has no back-dependency

    config.validate()
    if adjacency is None:
        adjacency = normalized_adjacency(graph)
    model = init_model(graph.num_users, graph.num_items, config)
    if config.init_target_norm > 0:
        # propagation shrinks row norms by a graph-dependent factor; rescale
        # once so the representations start near the target norm, keeping the
        # ranking and contrastive gradient fields on comparable footing
        norms = np.linalg.norm(propagate(model, adjacency), axis=1)
        mean_norm = float(norms.mean())
        if mean_norm > 0:
            factor = config.init_target_norm / mean_norm
            model.user_base *= factor
            model.item_base *= factor
    opt = _Optimizer(config, model.stacked_base().shape)

    ss = np.random.SeedSequence([config.seed, 0x7A]).spawn(2)
    rng_neg = np.random.default_rng(ss[0])
    rng_view = np.random.default_rng(ss[1])

    tr_u, tr_i = graph.edges_of(TRAIN)
    if len(tr_u) == 0:
        raise ConfigError("training split is empty")
    has_val = len(graph.edges_of(VAL)[0]) > 0

    log_rows = []
    best_val, since_best = -1.0, 0
    prop = propagate(model, adjacency)
    model.set_final(prop)

    for epoch in range(config.epochs):
        order = rng_neg.permutation(len(tr_u))
        neg = sample_negatives(graph, tr_u[order], rng_neg)
        ep_rec, ep_gcl, ep_total, n_batches = 0.0, 0.0, 0.0, 0
        for start in range(0, len(order), config.batch_size):
            sl = slice(start, start + config.batch_size)
            batch = np.column_stack([tr_u[order[sl]], tr_i[order[sl]], neg[sl]])
            seed = int(rng_view.integers(np.iinfo(np.int64).max))
            l_rec, l_gcl, total = joint_step(model, adjacency, batch, config,
                                             opt, seed, extra_prop_loss)
            ep_rec += l_rec
            ep_gcl += l_gcl
            ep_total += total
            n_batches += 1

        prop = propagate(model, adjacency)
        if not np.all(np.isfinite(prop)):
            raise NumericalError(f"non-finite embeddings after epoch {epoch}")
        model.set_final(prop)
        val_recall = (evaluate.recall_at_k(model, graph, config.eval_k, split=VAL)
                      if has_val else 0.0)
        row = {"epoch": epoch, "l_rec": ep_rec / n_batches,
               "l_gcl": ep_gcl / n_batches, "total": ep_total / n_batches,
               "val_recall": val_recall}
        log_rows.append(row)
        if epoch_end is not None:
            epoch_end(model, prop, epoch, row)

        if config.patience:
            if val_recall > best_val + 1e-9:
                best_val, since_best = val_recall, 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    log.info("early stop at epoch %d (val plateau)", epoch)
                    break

    if log_path is not None:
        write_training_log(log_rows, log_path)
    return model, log_rows


def write_training_log(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "l_rec", "l_gcl", "total", "val_recall"])
        writer.writeheader()
        writer.writerows(rows)


CHECKPOINT_VERSION = 1


def save_checkpoint(model: EmbeddingModel, path) -> None:
    """Binary matrix dump (float64) plus a config echo; round-trips exactly."""
    cfg = {f.name: getattr(model.config, f.name) for f in fields(model.config)}
    np.savez(
        path,
        version=CHECKPOINT_VERSION,
        user_base=model.user_base,
        item_base=model.item_base,
        user_final=model.user_final if model.user_final is not None else np.zeros(0),
        item_final=model.item_final if model.item_final is not None else np.zeros(0),
        config_json=np.bytes_(json.dumps(cfg, sort_keys=True)),
    )


def load_checkpoint(path) -> EmbeddingModel:
    with np.load(path) as data:
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {data['version']}")
        cfg = TrainConfig(**json.loads(bytes(data["config_json"]).decode()))
        model = EmbeddingModel(user_base=data["user_base"],
                               item_base=data["item_base"], config=cfg)
        if data["user_final"].size:
            model.user_final = data["user_final"]
            model.item_final = data["item_final"]
    return model
