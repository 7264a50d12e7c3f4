"""Session-scoped benchmark fixtures shared by the experiment tests.

The seeded synthetic benchmark (500 users, 800 items, power-law popularity)
and every trained artifact on it are built lazily, once per session, so the
acceptance criteria and the module-level experiment tests never retrain the
same model twice.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gclbench import attack, defense, evaluate, graphs, synth, trainer

BENCH_SEEDS = (1, 2, 3, 4, 5)
BENCH_SPEC = synth.SyntheticSpec(users=500, items=800, exponent=1.2,
                                 density=0.05, seed=7, groups=8,
                                 affinity=4.0, global_share=0.05)
SPLIT_SEED = 7
TARGET_SEED = 13
N_TARGETS = 10
ATTACK_SIZE = 0.05
EVAL_K = 50
CLEAR_ALPHA = 0.2
CLEAR_OUTER = 4
CLEAR_INNER = 12
CLEAR_RELAX_STEPS = 25
CLEAR_RELAX_LR = 0.02
DEFENSE_CONFIG = dict(rank=32, gamma=1.0, top_m=50, lambda_mit=0.1)


def bench_train_config(seed, omega=0.1, epochs=40):
    return trainer.TrainConfig(epochs=epochs, d=64, seed=seed, patience=None,
                               contrastive_weight=omega)


@pytest.fixture(scope="session")
def bench_graph():
    return graphs.split(synth.generate_synthetic(BENCH_SPEC), seed=SPLIT_SEED)


@pytest.fixture(scope="session")
def bench_targets(bench_graph):
    return graphs.select_targets(bench_graph, N_TARGETS, seed=TARGET_SEED)


@pytest.fixture(scope="session")
def contrastive_pair_models(bench_graph):
    """Per seed: the default contrastive model and its plain-ranking twin."""
    out = {}
    for seed in BENCH_SEEDS:
        gcl, _ = trainer.train(bench_graph, bench_train_config(seed, omega=0.1))
        plain, _ = trainer.train(bench_graph, bench_train_config(seed, omega=0.0))
        out[seed] = {"gcl": gcl, "plain": plain}
    return out


def _hit(model, graph, targets):
    return evaluate.hit_ratio_at_k(model, graph, targets.item_indices,
                                   graph.malicious_users, EVAL_K)


def _recall(model, graph):
    return evaluate.recall_at_k(model, graph, EVAL_K)


@pytest.fixture(scope="session")
def attack_runs(bench_graph, bench_targets, contrastive_pair_models):
    """Per seed: baseline vs random-attack vs bi-level-attack victims."""
    budget = attack.AttackBudget.from_graph(bench_graph, ATTACK_SIZE)
    out = {}
    for seed in BENCH_SEEDS:
        cfg = bench_train_config(seed)
        baseline = contrastive_pair_models[seed]["gcl"]

        prof_r = attack.random_attack(bench_graph, bench_targets, budget, seed)
        graph_r = graphs.inject_profiles(bench_graph, prof_r)
        victim_r, _ = trainer.train(graph_r, cfg)

        acfg = attack.ClearAttackConfig(
            alpha=CLEAR_ALPHA, outer_iterations=CLEAR_OUTER,
            inner_epochs=CLEAR_INNER, relax_steps=CLEAR_RELAX_STEPS,
            relax_lr=CLEAR_RELAX_LR,
            train_config=trainer.TrainConfig(d=64, patience=None), seed=seed)
        prof_c = attack.clear_attack(bench_graph, bench_targets, budget, acfg)
        graph_c = graphs.inject_profiles(bench_graph, prof_c)
        victim_c, _ = trainer.train(graph_c, cfg)

        out[seed] = {
            "baseline_hr": _hit(baseline, bench_graph, bench_targets),
            "baseline_recall": _recall(baseline, bench_graph),
            "random_hr": _hit(victim_r, graph_r, bench_targets),
            "random_recall": _recall(victim_r, graph_r),
            "clear_hr": _hit(victim_c, graph_c, bench_targets),
            "clear_recall": _recall(victim_c, graph_c),
            "clear_graph": graph_c,
            "clear_profiles": prof_c,
            "clear_victim": victim_c,
            "budget": budget,
        }
    return out


@pytest.fixture(scope="session")
def defense_runs(bench_targets, attack_runs):
    """Per seed: the epoch-lagged defense against the bi-level attack."""
    out = {}
    for seed in BENCH_SEEDS:
        run = attack_runs[seed]
        graph_c = run["clear_graph"]
        dcfg = defense.DefenseConfig(**DEFENSE_CONFIG)
        model, _, history = defense.sim_train(graph_c, bench_train_config(seed),
                                              dcfg)
        out[seed] = {
            "undefended_hr": run["clear_hr"],
            "undefended_recall": run["clear_recall"],
            "sim_hr": _hit(model, graph_c, bench_targets),
            "sim_recall": _recall(model, graph_c),
            "history": history,
        }
    return out


@pytest.fixture(scope="session")
def clean_defense_runs(bench_graph, contrastive_pair_models):
    """Per seed: the defense trained on the unpoisoned benchmark."""
    out = {}
    for seed in BENCH_SEEDS:
        dcfg = defense.DefenseConfig(**DEFENSE_CONFIG)
        model, _, _ = defense.sim_train(bench_graph, bench_train_config(seed),
                                        dcfg)
        out[seed] = {
            "plain_recall": _recall(contrastive_pair_models[seed]["gcl"],
                                    bench_graph),
            "sim_recall": _recall(model, bench_graph),
        }
    return out


@pytest.fixture(scope="session")
def ablation_runs(bench_targets, attack_runs):
    """Per seed: detection-only (hard removal) and suppression-only variants."""
    out = {}
    for seed in BENCH_SEEDS:
        run = attack_runs[seed]
        graph_c = run["clear_graph"]
        cfg = bench_train_config(seed)

        dcfg = defense.DefenseConfig(mode="no_suppression", **DEFENSE_CONFIG)
        model_as, removed, stripped = defense.suppression_removal_run(
            graph_c, cfg, dcfg)
        banned = sorted(removed)
        no_as_hr = evaluate.hit_ratio_at_k(
            model_as, stripped, bench_targets.item_indices,
            stripped.malicious_users, EVAL_K, banned_items=banned)
        no_as_recall = evaluate.recall_at_k(model_as, stripped, EVAL_K,
                                            banned_items=banned)

        dcfg2 = defense.DefenseConfig(mode="no_detection", **DEFENSE_CONFIG)
        fixed = defense.random_cold_candidates(graph_c,
                                               dcfg2.random_candidates, seed)
        model_ad, _, _ = defense.sim_train(graph_c, cfg, dcfg2,
                                           fixed_candidates=fixed)

        out[seed] = {
            "undefended_hr": run["clear_hr"],
            "undefended_recall": run["clear_recall"],
            "no_as_hr": no_as_hr,
            "no_as_recall": no_as_recall,
            "no_as_removed": len(removed),
            "no_ad_hr": _hit(model_ad, graph_c, bench_targets),
            "no_ad_recall": _recall(model_ad, graph_c),
        }
    return out
