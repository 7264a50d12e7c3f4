"""Two-phase defense: low-rank reconstruction-error anomaly detection with an
adaptive mean + gamma * std threshold, then cosine suppression between each
flagged item and its most-aligned users, folded into the training loss.

Detection runs on a propagated-embedding snapshot at each epoch boundary; the
flagged set and the top-m memberships stay frozen through the following epoch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import spectral, trainer
from .errors import ConfigError
from .graphs import InteractionGraph, normalized_adjacency, popularity_order

log = logging.getLogger(__name__)


@dataclass
class DefenseConfig:
    rank: int = 32                  # detection SVD rank k
    gamma: float = 1.0              # threshold multiplier
    top_m: int = 50                 # users suppressed per flagged item
    lambda_mit: float = 0.1         # mitigation weight in the total loss
    detection_every: int = 1        # epochs between detections
    mode: str = "sim"               # "sim", "no_suppression", "no_detection"
    random_candidates: int = 500    # |T| for the no_detection ablation

    def validate(self):
        if self.rank < 1 or self.top_m < 1 or self.lambda_mit < 0:
            raise ConfigError("invalid defense config")
        if self.mode not in ("sim", "no_suppression", "no_detection"):
            raise ConfigError(f"unknown defense mode: {self.mode}")


@dataclass
class DetectionResult:
    epsilon: np.ndarray
    mu: float
    s: float
    gamma: float
    flagged: frozenset

    def to_dict(self, item_ids=None) -> dict:
        names = (lambda i: item_ids[i]) if item_ids is not None else str
        return {
            "mu": self.mu,
            "s": self.s,
            "gamma": self.gamma,
            "flagged": sorted(names(i) for i in self.flagged),
            "epsilon": {names(i): float(e) for i, e in enumerate(self.epsilon)},
        }


def threshold_errors(epsilon: np.ndarray, gamma: float) -> DetectionResult:
    """Flag every item with epsilon >= mu + gamma * s (population statistics).

    When all errors are equal, s = 0 and the >= comparison flags everything;
    that degenerate behavior is intentional and documented.
    """
    epsilon = np.asarray(epsilon, dtype=np.float64)
    mu = float(epsilon.mean())
    s = float(epsilon.std())        # population std, ddof=0
    flagged = frozenset(int(i) for i in np.flatnonzero(epsilon >= mu + gamma * s))
    return DetectionResult(epsilon=epsilon, mu=mu, s=s, gamma=gamma,
                           flagged=flagged)


def detect_anomalies(item_emb: np.ndarray, k: int, gamma: float) -> DetectionResult:
    """Rank-k reconstruction errors of the item table, then the threshold rule."""
    eps = spectral.reconstruction_errors(item_emb, k)
    return threshold_errors(eps, gamma)


def mitigation_loss(item_emb: np.ndarray, user_emb: np.ndarray, flagged,
                    m: int, membership: dict[int, np.ndarray] | None = None):
    """Mean cosine between each flagged item and its top-m most similar users.

    Membership is selected here unless a frozen mapping is supplied (the
    epoch-lag strategy); either way the gradient differentiates only the
    cosines, never the membership. Empty flagged set gives loss 0.
    """
    flagged = sorted(int(i) for i in flagged)
    g_item = np.zeros_like(item_emb)
    g_user = np.zeros_like(user_emb)
    if not flagged:
        return 0.0, g_item, g_user
    if m > user_emb.shape[0]:
        raise ConfigError(f"top_m={m} exceeds {user_emb.shape[0]} users")
    if membership is None:
        membership = select_top_m_users(item_emb, user_emb, flagged, m)

    user_norms = np.linalg.norm(user_emb, axis=1)
    total = 0.0
    n_pairs = 0
    for i in flagged:
        zi = item_emb[i]
        ni = np.linalg.norm(zi)
        users = membership[i]
        for u in users:
            zu = user_emb[u]
            nu = user_norms[u]
            c = float(zi @ zu) / (ni * nu)
            total += c
            n_pairs += 1
            # d cos/d zi = zu/(|zi||zu|) - cos * zi/|zi|^2, symmetric for zu
            g_item[i] += zu / (ni * nu) - c * zi / (ni * ni)
            g_user[u] += zi / (ni * nu) - c * zu / (nu * nu)
    g_item /= n_pairs
    g_user /= n_pairs
    return total / n_pairs, g_item, g_user


def select_top_m_users(item_emb: np.ndarray, user_emb: np.ndarray, flagged,
                       m: int) -> dict[int, np.ndarray]:
    """Top-m users by cosine similarity per flagged item, ties to lower index."""
    user_norms = np.linalg.norm(user_emb, axis=1)
    safe_user = np.where(user_norms == 0, 1.0, user_norms)
    membership = {}
    for i in flagged:
        zi = item_emb[int(i)]
        ni = np.linalg.norm(zi)
        sims = (user_emb @ zi) / (safe_user * (ni if ni else 1.0))
        order = np.lexsort((np.arange(len(sims)), -sims))
        membership[int(i)] = order[:m]
    return membership


def sim_train(graph: InteractionGraph, train_config: trainer.TrainConfig,
              defense_config: DefenseConfig, *, fixed_candidates=None):
    """Training with the epoch-lagged detect-and-suppress loop.

    Epoch 0 runs without mitigation. After each epoch, detection runs on the
    propagated item embeddings; the flagged set and its top-m user memberships
    are frozen and applied through the next epoch, scaled by lambda_mit.
    ``fixed_candidates`` (the no_detection ablation) replaces detection with a
    constant candidate set. Returns (model, log, DetectionResult history).
    """
    defense_config.validate()
    dc = defense_config
    history: list[DetectionResult] = []
    frozen: dict = {"flagged": None, "membership": None}
    adjacency = normalized_adjacency(graph)
    num_users = graph.num_users

    def extra(prop):
        if dc.lambda_mit == 0 or not frozen["flagged"]:
            return None
        item_emb = prop[num_users:]
        user_emb = prop[:num_users]
        l_mit, g_item, g_user = mitigation_loss(
            item_emb, user_emb, frozen["flagged"], dc.top_m,
            membership=frozen["membership"])
        g_prop = np.vstack([g_user, g_item]) * dc.lambda_mit
        return dc.lambda_mit * l_mit, g_prop

    def on_epoch_end(model, prop, epoch, row):
        if (epoch + 1) % dc.detection_every:
            return
        item_emb = prop[num_users:]
        user_emb = prop[:num_users]
        if fixed_candidates is not None:
            flagged = frozenset(int(i) for i in fixed_candidates)
            result = DetectionResult(
                epsilon=np.zeros(item_emb.shape[0]), mu=0.0, s=0.0,
                gamma=dc.gamma, flagged=flagged)
        else:
            result = detect_anomalies(item_emb, dc.rank, dc.gamma)
            flagged = result.flagged
        history.append(result)
        frozen["flagged"] = flagged
        frozen["membership"] = (
            select_top_m_users(item_emb, user_emb, flagged, dc.top_m)
            if flagged else None)
        row["flagged"] = len(flagged)

    model, log_rows = trainer.train(graph, train_config, adjacency=adjacency,
                                    extra_prop_loss=extra,
                                    epoch_end=on_epoch_end)
    return model, log_rows, history


def random_cold_candidates(graph: InteractionGraph, count: int,
                           seed: int) -> frozenset:
    """Random cold items (bottom-80% popularity pool) for the no_detection mode."""
    order = popularity_order(graph)
    pool_size = int(0.8 * graph.num_items)
    pool = order[graph.num_items - pool_size:]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xAD]))
    take = min(count, len(pool))
    return frozenset(int(i) for i in rng.choice(pool, size=take, replace=False))


def suppression_removal_run(graph: InteractionGraph,
                            train_config: trainer.TrainConfig,
                            defense_config: DefenseConfig):
    """The no_suppression ablation: train, detect once, hard-remove everything
    flagged (items leave the catalog with their interactions), retrain.

    Returns (model, removed item set); evaluation must ban the removed items.
    """
    model, _ = trainer.train(graph, train_config)
    result = detect_anomalies(model.item_final, defense_config.rank,
                              defense_config.gamma)
    removed = result.flagged
    keep = ~np.isin(graph.edges_i, np.array(sorted(removed), dtype=np.int64))
    stripped = InteractionGraph(
        num_users=graph.num_users,
        num_items=graph.num_items,
        edges_u=graph.edges_u[keep],
        edges_i=graph.edges_i[keep],
        split=graph.split[keep],
        user_ids=graph.user_ids,
        item_ids=graph.item_ids,
        malicious_users=graph.malicious_users,
    )
    retrained, _ = trainer.train(stripped, train_config)
    return retrained, removed, stripped


def write_detection_json(result: DetectionResult, path, item_ids=None,
                         config_hash: str = "") -> None:
    payload = result.to_dict(item_ids)
    if config_hash:
        payload["config_hash"] = config_hash
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
