"""End-to-end experiment pipeline: data, training, attack, defense, metrics.

Every artifact is stamped with the config hash; a persisted config re-runs to
byte-identical metric files in serial mode. Stage failures keep the partial
artifacts and leave an error manifest in the output directory.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from . import attack as attack_mod
from . import defense as defense_mod
from . import evaluate, graphs, spectral, synth, trainer
from .config import ExperimentConfig

log = logging.getLogger(__name__)


def resolve_graph(config: ExperimentConfig) -> graphs.InteractionGraph:
    """Load or generate the interaction data, then split it."""
    if config["data.path"]:
        g = graphs.load_interactions(config["data.path"])
    else:
        g = synth.generate_synthetic(config.synth_spec())
    return graphs.split(g, config["split.ratios"], config["split.seed"],
                        per_user=config["split.per_user"])


def _spectrum(model, path, config_hash):
    report = spectral.spectrum_report(model.item_final)
    spectral.write_spectrum_csv(report["singular_values"], path, config_hash)


def run_seed(config: ExperimentConfig, graph, targets, seed: int, out: Path,
             config_hash: str) -> list[evaluate.MetricsReport]:
    """All stages for one seed; returns the metric rows it produced."""
    out.mkdir(parents=True, exist_ok=True)
    k = config["eval.k"]
    rows = []
    tcfg = config.train_config(seed)

    base_model, _ = trainer.train(graph, tcfg,
                                  log_path=out / "train_log_clean.csv")
    trainer.save_checkpoint(base_model, out / "model_clean.npz")
    _spectrum(base_model, out / "spectrum_clean.csv", config_hash)
    rows.append(evaluate.evaluate_model(base_model, graph, targets.item_indices,
                                        k, label="no_attack", seed=seed,
                                        config_hash=config_hash))

    victim_graph = graph
    method = config["attack.method"]
    if method != "none":
        budget = attack_mod.AttackBudget.from_graph(graph, config["attack.size"])
        if method == "random":
            profiles = attack_mod.random_attack(graph, targets, budget, seed)
        else:
            profiles = attack_mod.clear_attack(graph, targets, budget,
                                               config.attack_config(seed))
        attack_mod.validate_profiles(profiles, budget, targets.item_indices)
        attack_mod.save_profiles(profiles, out, item_ids=graph.item_ids,
                                 config_hash=config_hash)
        victim_graph = graphs.inject_profiles(graph, profiles)
        victim, _ = trainer.train(victim_graph, tcfg,
                                  log_path=out / "train_log_attacked.csv")
        trainer.save_checkpoint(victim, out / "model_attacked.npz")
        _spectrum(victim, out / "spectrum_attacked.csv", config_hash)
        rows.append(evaluate.evaluate_model(victim, victim_graph,
                                            targets.item_indices, k,
                                            label=f"attacked:{method}",
                                            seed=seed, config_hash=config_hash))

    if config["defense.enabled"]:
        dcfg = config.defense_config()
        label = f"defended:{dcfg.mode}"
        if dcfg.mode == "no_suppression":
            model, removed, stripped = defense_mod.suppression_removal_run(
                victim_graph, tcfg, dcfg)
            trainer.save_checkpoint(model, out / "model_defended.npz")
            rows.append(evaluate.evaluate_model(
                model, stripped, targets.item_indices, k, label=label,
                seed=seed, config_hash=config_hash,
                banned_items=sorted(removed)))
        else:
            fixed = None
            if dcfg.mode == "no_detection":
                fixed = defense_mod.random_cold_candidates(
                    victim_graph, dcfg.random_candidates, seed)
            model, _, history = defense_mod.sim_train(victim_graph, tcfg, dcfg,
                                                      fixed_candidates=fixed)
            trainer.save_checkpoint(model, out / "model_defended.npz")
            if history:
                defense_mod.write_detection_json(
                    history[-1], out / "detection.json",
                    item_ids=victim_graph.item_ids, config_hash=config_hash)
            _spectrum(model, out / "spectrum_defended.csv", config_hash)
            rows.append(evaluate.evaluate_model(model, victim_graph,
                                                targets.item_indices, k,
                                                label=label, seed=seed,
                                                config_hash=config_hash))
    return rows


def run_pipeline(config: ExperimentConfig) -> Path:
    """Run every stage for every seed; returns the artifact directory."""
    out = Path(config["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    config_hash = config.config_hash()
    config.write(out / "config.txt")
    (out / "manifest.json").write_text(json.dumps({
        "config_hash": config_hash,
        "package_version": __import__("gclbench").__version__,
        "seeds": config["seeds"],
    }, indent=2, sort_keys=True))

    try:
        graph = resolve_graph(config)
        graphs.save_snapshot(graph, out / "graph", config_hash)
        targets = graphs.select_targets(graph, config["targets.count"],
                                        config["targets.seed"])
        (out / "targets.json").write_text(json.dumps({
            "item_indices": list(targets.item_indices),
            "item_ids": [graph.item_ids[i] for i in targets.item_indices],
            "selection_seed": targets.selection_seed,
            "config_hash": config_hash,
        }, indent=2, sort_keys=True))

        all_rows = []
        for seed in config["seeds"]:
            all_rows.extend(run_seed(config, graph, targets, seed,
                                     out / f"seed_{seed}", config_hash))
        report = evaluate.build_report(all_rows)
        report["config_hash"] = config_hash
        evaluate.write_report(report, out)
    except Exception as exc:
        (out / "error_manifest.json").write_text(json.dumps({
            "config_hash": config_hash,
            "error_type": type(exc).__name__,
            "error": str(exc),
        }, indent=2, sort_keys=True))
        raise
    return out
