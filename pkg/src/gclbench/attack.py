"""Malicious profile construction: a random-filler baseline and the bi-level
attack that alternates victim retraining with a continuous relaxation of the
fake users, optimizing embedding dispersion plus a rank-promotion objective.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np

from . import evaluate, spectral, trainer
from .errors import BudgetError, ConfigError
from .graphs import (TRAIN, InteractionGraph, TargetSet, inject_profiles,
                     user_degree_stats)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackBudget:
    """Injection limits: fake-user head count and per-profile interaction quota."""

    max_fake_users: int
    per_user_quota: int
    attack_size: float = 0.01

    @classmethod
    def from_graph(cls, graph: InteractionGraph, attack_size: float = 0.01):
        mean_deg, _ = user_degree_stats(graph)
        return cls(
            max_fake_users=math.ceil(attack_size * len(graph.real_users)),
            per_user_quota=math.floor(mean_deg),
            attack_size=attack_size,
        )

    def check_targets(self, targets) -> None:
        if self.per_user_quota < len(targets):
            raise BudgetError(
                f"quota {self.per_user_quota} cannot cover {len(targets)} targets")


@dataclass
class MaliciousProfileSet:
    fake_user_ids: list[str]
    interactions: list[list[int]]     # per fake user, ordered item list
    generator: str
    seed: int
    budget: AttackBudget
    config: dict = field(default_factory=dict)

    def edge_count(self) -> int:
        return sum(len(items) for items in self.interactions)


def validate_profiles(profiles: MaliciousProfileSet, budget: AttackBudget,
                      targets) -> None:
    """Enforce the budget invariants on an emitted profile set."""
    if len(profiles.fake_user_ids) > budget.max_fake_users:
        raise BudgetError(
            f"{len(profiles.fake_user_ids)} fake users exceed cap {budget.max_fake_users}")
    target_set = set(int(t) for t in targets)
    for uid, items in zip(profiles.fake_user_ids, profiles.interactions):
        if len(items) > budget.per_user_quota:
            raise BudgetError(f"{uid} has {len(items)} > quota {budget.per_user_quota}")
        if len(set(items)) != len(items):
            raise BudgetError(f"{uid} has duplicate items")
        if not target_set.issubset(items):
            raise BudgetError(f"{uid} is missing target items")


def random_attack(graph: InteractionGraph, targets: TargetSet,
                  budget: AttackBudget, seed: int) -> MaliciousProfileSet:
    """Each fake user gets every target plus uniform-random filler up to quota."""
    budget.check_targets(targets.item_indices)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA77]))
    target_list = [int(t) for t in targets.item_indices]
    pool = np.setdiff1d(np.arange(graph.num_items), np.array(target_list))
    n_filler = budget.per_user_quota - len(target_list)
    profiles, ids = [], []
    for k in range(budget.max_fake_users):
        filler = rng.choice(pool, size=min(n_filler, len(pool)), replace=False)
        profiles.append(target_list + [int(i) for i in filler])
        ids.append(f"fake_{k:04d}")
    out = MaliciousProfileSet(fake_user_ids=ids, interactions=profiles,
                              generator="random", seed=seed, budget=budget)
    validate_profiles(out, budget, target_list)
    return out


def _g(x: np.ndarray) -> np.ndarray:
    """Hinge-like margin transform: x for x >= 0, e^x - 1 below."""
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def _g_prime(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


def rank_promotion_loss(user_emb: np.ndarray, item_emb: np.ndarray, targets,
                        top_k_lists: dict[int, np.ndarray], real_users,
                        interacted=None):
    """Margin loss pushing each target's score above the user's weakest
    recommended non-target item.

    For each real user u and target t not already interacted with,
    g(z_u . z_t - min over the user's top-k non-target items of z_u . z_i).
    Users whose whole top-k is targets fall back to their best non-target
    item overall. Returns the loss and gradients for both tables; the top-k
    membership and the argmin are treated as fixed.
    """
    targets = [int(t) for t in targets]
    target_set = set(targets)
    g_user = np.zeros_like(user_emb)
    g_item = np.zeros_like(item_emb)
    loss = 0.0
    n_items = item_emb.shape[0]
    for u in real_users:
        u = int(u)
        zu = user_emb[u]
        lst = top_k_lists[u]
        non_target = [i for i in lst if i not in target_set]
        if non_target:
            scores = item_emb[non_target] @ zu
            m_item = int(non_target[int(np.argmin(scores))])
        else:
            # degenerate: entire top-k is targets; best-ranked non-target overall
            scores = item_emb @ zu
            order = np.lexsort((np.arange(n_items), -scores))
            m_item = next(int(i) for i in order if i not in target_set)
        zm = item_emb[m_item]
        s_min = float(zm @ zu)
        skip = interacted[u] if interacted is not None else ()
        for t in targets:
            if t in skip:
                continue
            x = float(user_emb[u] @ item_emb[t]) - s_min
            loss += float(_g(np.array(x)))
            gp = float(_g_prime(np.array(x)))
            g_user[u] += gp * (item_emb[t] - zm)
            g_item[t] += gp * zu
            g_item[m_item] -= gp * zu
    return loss, g_user, g_item


def attack_objective(user_emb: np.ndarray, item_emb: np.ndarray, targets,
                     alpha: float, seed: int, *, top_k_lists, real_users,
                     interacted=None, dispersion_fn=None):
    """Combined poisoning objective: dispersion plus alpha * rank promotion.

    The dispersion term sees the stacked user+item matrix; rank promotion sees
    the two tables. ``dispersion_fn`` is injectable for testing. Note the
    documented attack direction is mixed: the bi-level loop descends the
    dispersion term while ascending the rank term (see clear_attack); this
    function reports the literal combined value and gradient.
    """
    if alpha < 0:
        raise ConfigError("alpha must be nonnegative")
    fn = dispersion_fn if dispersion_fn is not None else spectral.dispersion_loss
    stacked = np.vstack([user_emb, item_emb])
    l_d, g_d, _ = fn(stacked, seed)
    n_users = user_emb.shape[0]
    g_user = g_d[:n_users].copy()
    g_item = g_d[n_users:].copy()
    l_r = 0.0
    if alpha > 0:
        l_r, g_ru, g_ri = rank_promotion_loss(user_emb, item_emb, targets,
                                              top_k_lists, real_users,
                                              interacted)
        g_user += alpha * g_ru
        g_item += alpha * g_ri
    return l_d + alpha * l_r, g_user, g_item, {"dispersion": l_d, "rank": l_r}


@dataclass
class ClearAttackConfig:
    alpha: float = 1.0
    outer_iterations: int = 10
    inner_epochs: int = 20
    relax_steps: int = 30            # gradient steps of the outer relaxation
    relax_lr: float = 0.05
    top_k: int = 50
    train_config: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    seed: int = 0


def _greedy_profiles(user_final: np.ndarray, item_final: np.ndarray,
                     fake_rows, targets, budget: AttackBudget) -> list[list[int]]:
    """Snap each fake user's embedding to its nearest items under the quota."""
    target_list = [int(t) for t in targets]
    n_filler = budget.per_user_quota - len(target_list)
    target_mask = np.zeros(item_final.shape[0], dtype=bool)
    target_mask[target_list] = True
    out = []
    for f in fake_rows:
        if n_filler <= 0:
            out.append(list(target_list))
            continue
        scores = item_final @ user_final[f]
        scores[target_mask] = -np.inf
        order = np.lexsort((np.arange(len(scores)), -scores))
        filler = [int(i) for i in order[:n_filler]]
        out.append(target_list + filler)
    return out


def clear_attack(graph: InteractionGraph, targets: TargetSet,
                 budget: AttackBudget,
                 attack_config: ClearAttackConfig) -> MaliciousProfileSet:
    """Bi-level profile construction.

    Each outer iteration retrains the victim from scratch on the poisoned
    graph (truncated inner epochs), then runs a continuous relaxation over
    all embeddings, fake-user rows included. The documented descent
    direction minimizes the dispersion similarity loss (drawing rows toward
    the dominant spectral axis, which is what makes the nearest-item
    selection concentrate on well-connected items) while maximizing the rank
    promotion term, i.e. the relaxation descends L_D - alpha * L_R.
    Afterwards every fake profile is re-selected greedily as the quota's
    nearest items by dot product plus all targets. Stops at the iteration
    cap or when the profile set reaches a fixed point.
    """
    cfg = attack_config
    budget.check_targets(targets.item_indices)
    target_list = [int(t) for t in targets.item_indices]
    n_fake = budget.max_fake_users
    ids = [f"fake_{k:04d}" for k in range(n_fake)]

    if cfg.outer_iterations <= 0:
        out = MaliciousProfileSet(fake_user_ids=ids,
                                  interactions=[list(target_list)
                                                for _ in range(n_fake)],
                                  generator="clear", seed=cfg.seed, budget=budget,
                                  config={"alpha": cfg.alpha, "outer_iterations": 0})
        validate_profiles(out, budget, target_list)
        return out

    # the malicious interaction set starts empty: in the first iteration the
    # fake users sit isolated at their random init, so the first greedy pass
    # reads norm-dominated dot products against the trained catalog
    interactions: list[list[int]] = [[] for _ in range(n_fake)]

    inner_cfg = dc_replace(cfg.train_config, epochs=cfg.inner_epochs,
                           patience=None, seed=cfg.seed)
    fake_rows = list(range(graph.num_users, graph.num_users + n_fake))
    # the rank term of the relaxation runs over every user of the poisoned
    # system; the already-interacting exclusion counts only legitimate edges,
    # so the fake rows keep all their target terms. Chasing the promoted
    # targets is what pins every free fake vector to the same side of the
    # dominant axis that the dispersion descent stretches.
    relax_users = list(graph.real_users) + fake_rows
    interacted = {int(u): graph.user_items(None)[u] for u in graph.real_users}
    for f in fake_rows:
        interacted[f] = ()

    for it in range(cfg.outer_iterations):
        profiles = MaliciousProfileSet(fake_user_ids=ids,
                                       interactions=interactions,
                                       generator="clear", seed=cfg.seed,
                                       budget=budget)
        poisoned = inject_profiles(graph, profiles)
        model, _ = trainer.train(poisoned, dc_replace(inner_cfg, seed=cfg.seed + it))

        # outer relaxation on the propagated representations
        user_emb = model.user_final.copy()
        item_emb = model.item_final.copy()
        lists = evaluate.top_k_lists(model, cfg.top_k,
                                     poisoned.user_items(TRAIN),
                                     users=relax_users)
        opt_cfg = dc_replace(cfg.train_config, optimizer="adam",
                             learning_rate=cfg.relax_lr)
        opt = trainer._Optimizer(opt_cfg, (user_emb.shape[0] + item_emb.shape[0],
                                           user_emb.shape[1]))
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, it, 0xC]))
        n_users_all = user_emb.shape[0]
        for _ in range(cfg.relax_steps):
            step_seed = int(rng.integers(np.iinfo(np.int64).max))
            _, g_d, _ = spectral.dispersion_loss(
                np.vstack([user_emb, item_emb]), step_seed)
            g_u = g_d[:n_users_all].copy()
            g_i = g_d[n_users_all:].copy()
            if cfg.alpha > 0:
                _, g_ru, g_ri = rank_promotion_loss(
                    user_emb, item_emb, target_list, lists, relax_users,
                    interacted)
                g_u -= cfg.alpha * g_ru
                g_i -= cfg.alpha * g_ri
            stacked = np.vstack([user_emb, item_emb])
            opt.step(stacked, np.vstack([g_u, g_i]))
            user_emb = stacked[:n_users_all]
            item_emb = stacked[n_users_all:]

        new_interactions = _greedy_profiles(user_emb, item_emb, fake_rows,
                                            target_list, budget)
        if new_interactions == interactions:
            log.info("profile fixed point at outer iteration %d", it)
            interactions = new_interactions
            break
        interactions = new_interactions

    out = MaliciousProfileSet(
        fake_user_ids=ids, interactions=interactions, generator="clear",
        seed=cfg.seed, budget=budget,
        config={"alpha": cfg.alpha, "outer_iterations": cfg.outer_iterations,
                "inner_epochs": cfg.inner_epochs, "relax_steps": cfg.relax_steps,
                "relax_lr": cfg.relax_lr, "top_k": cfg.top_k})
    validate_profiles(out, budget, target_list)
    return out


def save_profiles(profiles: MaliciousProfileSet, out_dir, item_ids=None,
                  config_hash: str = "") -> None:
    """TSV of (fake_user_id, item_id) pairs plus a JSON manifest.

    The TSV concatenates directly onto a training TSV; original string ids
    are used when an id map is supplied.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "profiles.tsv").open("w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        for uid, items in zip(profiles.fake_user_ids, profiles.interactions):
            for i in items:
                label = item_ids[i] if item_ids is not None else str(i)
                fh.write(f"{uid}\t{label}\n")
    manifest = {
        "generator": profiles.generator,
        "seed": profiles.seed,
        "budget": {
            "max_fake_users": profiles.budget.max_fake_users,
            "per_user_quota": profiles.budget.per_user_quota,
            "attack_size": profiles.budget.attack_size,
        },
        "config": profiles.config,
        "edge_count": profiles.edge_count(),
    }
    if config_hash:
        manifest["config_hash"] = config_hash
    (out / "profiles.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
