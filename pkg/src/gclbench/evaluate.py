"""Ranking metrics with deterministic tie-breaking, plus report assembly.

Scores are inner products of the model's final (propagated) embeddings.
Training items are always excluded from a user's candidate list; equal scores
rank the lower item index first so every metric is reproducible bit-for-bit.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .graphs import TEST, TRAIN, InteractionGraph

log = logging.getLogger(__name__)


def _final(model):
    if model.user_final is None or model.item_final is None:
        raise ConfigError("model has no final embeddings; train or propagate first")
    return model.user_final, model.item_final


def _ranked_items(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k indices by descending score, ties toward the lower index.

    Excluded candidates are marked -inf by the caller and never returned.
    """
    n = len(scores)
    order = np.lexsort((np.arange(n), -scores))
    rankable = scores[order] > -np.inf
    return order[rankable][:k]


def top_k(model, user: int, k: int, exclusions=None) -> np.ndarray:
    """The user's top-k items; shorter (with a warning) if fewer are rankable."""
    user_final, item_final = _final(model)
    scores = item_final @ user_final[user]
    if exclusions is not None and len(exclusions):
        scores[np.asarray(exclusions)] = -np.inf
    out = _ranked_items(scores, k)
    if len(out) < k:
        log.warning("user %d has only %d rankable items (k=%d)", user, len(out), k)
    return out


def top_k_lists(model, k: int, exclusions_per_user, users=None,
                banned_items=None) -> dict[int, np.ndarray]:
    """Top-k lists for many users at once (the per-user protocol of top_k)."""
    user_final, item_final = _final(model)
    if users is None:
        users = range(user_final.shape[0])
    banned = np.asarray(banned_items) if banned_items is not None and len(banned_items) else None
    lists = {}
    for u in users:
        scores = item_final @ user_final[u]
        excl = exclusions_per_user[u]
        if len(excl):
            scores[excl] = -np.inf
        if banned is not None:
            scores[banned] = -np.inf
        lists[int(u)] = _ranked_items(scores, k)
    return lists


def recall_at_k(model, graph: InteractionGraph, k: int, split: int = TEST,
                banned_items=None) -> float:
    """Mean over users with held-out items of |top_k ∩ held_out| / |held_out|."""
    held = graph.user_items(split)
    train_items = graph.user_items(TRAIN)
    users = [u for u in graph.real_users if len(held[u])]
    if not users:
        raise ConfigError("no users with held-out items in this split")
    lists = top_k_lists(model, k, train_items, users=users,
                        banned_items=banned_items)
    total = 0.0
    for u in users:
        hits = np.intersect1d(lists[u], held[u], assume_unique=True)
        total += len(hits) / len(held[u])
    return total / len(users)


def hit_ratio_at_k(model, graph: InteractionGraph, targets, malicious_users,
                   k: int, variant: str = "per_target",
                   banned_items=None) -> float:
    """Fraction of (real user, target) pairs with the target in the top-k.

    variant="any" instead counts users with at least one target present.
    Malicious users never enter the average.
    """
    targets = list(targets)
    if not targets:
        raise ConfigError("empty target set")
    malicious = set(int(m) for m in malicious_users) if malicious_users else set()
    users = [u for u in range(graph.num_users) if u not in malicious]
    train_items = graph.user_items(TRAIN)
    lists = top_k_lists(model, k, train_items, users=users,
                        banned_items=banned_items)
    target_arr = np.array(targets)
    per_pair = 0
    any_hit = 0
    for u in users:
        present = np.isin(target_arr, lists[u], assume_unique=False)
        per_pair += int(present.sum())
        any_hit += int(present.any())
    if variant == "per_target":
        return per_pair / (len(users) * len(targets))
    if variant == "any":
        return any_hit / len(users)
    raise ConfigError(f"unknown hit-ratio variant: {variant}")


def per_target_hit_rates(model, graph: InteractionGraph, targets,
                         malicious_users, k: int) -> dict[int, float]:
    malicious = set(int(m) for m in malicious_users) if malicious_users else set()
    users = [u for u in range(graph.num_users) if u not in malicious]
    train_items = graph.user_items(TRAIN)
    lists = top_k_lists(model, k, train_items, users=users)
    rates = {}
    for t in targets:
        rates[int(t)] = sum(1 for u in users if t in lists[u]) / len(users)
    return rates


@dataclass
class MetricsReport:
    label: str
    recall_at_k: float
    hit_ratio_at_k: float
    hit_ratio_any: float
    k: int
    per_target: dict = field(default_factory=dict)
    excluded_users: int = 0
    seed: int | None = None
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "recall_at_k": self.recall_at_k,
            "hit_ratio_at_k": self.hit_ratio_at_k,
            "hit_ratio_any": self.hit_ratio_any,
            "k": self.k,
            "per_target": {str(t): r for t, r in self.per_target.items()},
            "excluded_users": self.excluded_users,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }


def evaluate_model(model, graph: InteractionGraph, targets, k: int,
                   label: str = "", seed=None, config_hash: str = "",
                   banned_items=None) -> MetricsReport:
    """Bundle recall and both hit-ratio variants into one report row."""
    malicious = graph.malicious_users
    return MetricsReport(
        label=label,
        recall_at_k=recall_at_k(model, graph, k, banned_items=banned_items),
        hit_ratio_at_k=hit_ratio_at_k(model, graph, targets, malicious, k,
                                      banned_items=banned_items),
        hit_ratio_any=hit_ratio_at_k(model, graph, targets, malicious, k,
                                     variant="any", banned_items=banned_items),
        k=k,
        per_target=per_target_hit_rates(model, graph, targets, malicious, k),
        excluded_users=len(malicious),
        seed=seed,
        config_hash=config_hash,
    )


REPORT_SCHEMA_VERSION = 1


def build_report(runs: list[MetricsReport]) -> dict:
    """Aggregate evaluated runs into a JSON-able table with per-label means.

    Raw values are stored unscaled; the CSV writer adds a x100 display column
    for hit ratios.
    """
    if not runs:
        raise ConfigError("need at least one run")
    rows = [r.to_dict() for r in runs]
    by_label: dict[str, list[MetricsReport]] = {}
    for r in runs:
        by_label.setdefault(r.label, []).append(r)
    means = []
    for label, group in by_label.items():
        means.append({
            "label": label,
            "n_runs": len(group),
            "recall_at_k": float(np.mean([g.recall_at_k for g in group])),
            "hit_ratio_at_k": float(np.mean([g.hit_ratio_at_k for g in group])),
            "hit_ratio_any": float(np.mean([g.hit_ratio_any for g in group])),
        })
    return {"schema_version": REPORT_SCHEMA_VERSION, "runs": rows, "means": means}


def write_report(report: dict, out_dir, stem: str = "metrics") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with (out / f"{stem}.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "seed", "recall_at_k", "hit_ratio_at_k",
                         "hit_ratio_any", "hit_ratio_x100"])
        for row in report["runs"]:
            writer.writerow([row["label"], row["seed"], repr(row["recall_at_k"]),
                             repr(row["hit_ratio_at_k"]), repr(row["hit_ratio_any"]),
                             f"{100 * row['hit_ratio_at_k']:.4f}"])
        for m in report["means"]:
            writer.writerow([f"{m['label']}::mean", m["n_runs"],
                             repr(m["recall_at_k"]), repr(m["hit_ratio_at_k"]),
                             repr(m["hit_ratio_any"]),
                             f"{100 * m['hit_ratio_at_k']:.4f}"])
