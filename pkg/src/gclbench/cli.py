"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 budget
violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import defense as defense_mod
from . import evaluate, graphs, spectral, synth, trainer
from .config import ExperimentConfig, schema_dump
from .errors import BudgetError, ConfigError, NumericalError
from .pipeline import run_pipeline

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_BUDGET = 2, 3, 4


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--d", type=int, default=128)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--temperature", type=float, default=0.2)
    p.add_argument("--contrastive-weight", type=float, default=0.1)
    p.add_argument("--augmentation", choices=["embedding_noise", "edge_dropout"],
                   default="embedding_noise")
    p.add_argument("--patience", type=int, default=0,
                   help="early-stop patience; 0 disables")
    p.add_argument("--seed", type=int, default=0)


def _train_config(args) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        epochs=args.epochs, d=args.d, layers=args.layers,
        batch_size=args.batch_size, learning_rate=args.learning_rate,
        temperature=args.temperature,
        contrastive_weight=args.contrastive_weight,
        augmentation=args.augmentation,
        patience=args.patience or None, seed=args.seed)


def _load_graph(path) -> graphs.InteractionGraph:
    p = Path(path)
    if p.is_dir():
        return graphs.load_snapshot(p)
    g = graphs.load_interactions(p)
    return graphs.split(g)


def _load_targets(args, graph) -> graphs.TargetSet:
    if args.targets:
        wanted = [line.strip() for line in
                  Path(args.targets).read_text(encoding="utf-8").splitlines()
                  if line.strip() and not line.startswith("#")]
        index = {s: k for k, s in enumerate(graph.item_ids)}
        missing = [w for w in wanted if w not in index]
        if missing:
            raise ConfigError(f"unknown target item ids: {missing}")
        return graphs.TargetSet(item_indices=tuple(index[w] for w in wanted),
                                selection_seed=-1)
    return graphs.select_targets(graph, args.n_targets, args.target_seed)


def cmd_ingest(args):
    g = graphs.load_interactions(args.input)
    g = graphs.split(g, tuple(float(x) for x in args.ratios.split(",")),
                     args.seed, per_user=not args.global_split)
    graphs.save_snapshot(g, args.output)
    stats = graphs.graph_stats(g)
    print(json.dumps(stats, indent=2, sort_keys=True))


def cmd_synth(args):
    spec = synth.SyntheticSpec(users=args.users, items=args.items,
                               exponent=args.exponent, density=args.density,
                               seed=args.seed, groups=args.groups,
                               affinity=args.affinity)
    g = synth.generate_synthetic(spec)
    g = graphs.split(g, seed=args.seed)
    graphs.save_snapshot(g, args.output)
    print(json.dumps(graphs.graph_stats(g), indent=2, sort_keys=True))


def cmd_train(args):
    g = _load_graph(args.data)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = trainer.train(g, _train_config(args),
                             log_path=out / "train_log.csv")
    trainer.save_checkpoint(model, out / "model.npz")
    print(f"checkpoint written to {out / 'model.npz'}")


def cmd_spectrum(args):
    model = trainer.load_checkpoint(args.checkpoint)
    matrix = model.item_final if args.items_only else np.vstack(
        [model.user_final, model.item_final])
    report = spectral.spectrum_report(matrix)
    spectral.write_spectrum_csv(report["singular_values"], args.output)
    print(json.dumps({"top_share": report["top_share"],
                      "effective_rank": report["effective_rank"]}, indent=2))


def cmd_attack(args):
    g = _load_graph(args.data)
    targets = _load_targets(args, g)
    budget = attack_mod.AttackBudget.from_graph(g, args.attack_size)
    if args.method == "random":
        profiles = attack_mod.random_attack(g, targets, budget, args.seed)
    else:
        cfg = attack_mod.ClearAttackConfig(
            alpha=args.alpha, outer_iterations=args.outer_iterations,
            inner_epochs=args.inner_epochs, seed=args.seed,
            train_config=_train_config(args))
        profiles = attack_mod.clear_attack(g, targets, budget, cfg)
    attack_mod.save_profiles(profiles, args.output, item_ids=g.item_ids)
    print(f"profiles written to {args.output}")


def cmd_defend(args):
    g = _load_graph(args.data)
    mode = "sim"
    if args.ablate_suppression:
        mode = "no_suppression"
    if args.ablate_detection:
        mode = "no_detection"
    dcfg = defense_mod.DefenseConfig(rank=args.rank, gamma=args.gamma,
                                     top_m=args.top_m,
                                     lambda_mit=args.lambda_mit, mode=mode)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = _train_config(args)
    if mode == "no_suppression":
        model, removed, _ = defense_mod.suppression_removal_run(g, tcfg, dcfg)
        (out / "removed_items.json").write_text(json.dumps(
            sorted(g.item_ids[i] for i in removed), indent=2))
    else:
        fixed = None
        if mode == "no_detection":
            fixed = defense_mod.random_cold_candidates(
                g, dcfg.random_candidates, args.seed)
        model, _, history = defense_mod.sim_train(g, tcfg, dcfg,
                                                  fixed_candidates=fixed)
        if history:
            defense_mod.write_detection_json(history[-1], out / "detection.json",
                                             item_ids=g.item_ids)
    trainer.save_checkpoint(model, out / "model.npz")
    print(f"defended checkpoint written to {out / 'model.npz'}")


def cmd_evaluate(args):
    g = _load_graph(args.data)
    model = trainer.load_checkpoint(args.checkpoint)
    targets = _load_targets(args, g)
    report = evaluate.evaluate_model(model, g, targets.item_indices, args.k,
                                     label=args.label)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def cmd_pipeline(args):
    cfg = ExperimentConfig.from_file(args.config)
    out = run_pipeline(cfg)
    print(f"artifacts in {out}")


def cmd_schema(args):
    print(json.dumps(schema_dump(), indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="gclbench",
        description="Train, attack, and defend graph-contrastive recommenders.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a TSV, split it, write a snapshot")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--global-split", action="store_true",
                   help="split globally instead of per user")
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic benchmark graph")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=800)
    p.add_argument("--exponent", type=float, default=1.2)
    p.add_argument("--density", type=float, default=0.025)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--affinity", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train embeddings on a snapshot")
    p.add_argument("--data", required=True)
    p.add_argument("--output", required=True)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("spectrum", help="export the singular spectrum of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--items-only", action="store_true")
    p.set_defaults(fn=cmd_spectrum)

    p = sub.add_parser("attack", help="construct malicious profiles")
    p.add_argument("--data", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--method", choices=["random", "clear"], required=True)
    p.add_argument("--attack-size", type=float, default=0.01)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--outer-iterations", type=int, default=10)
    p.add_argument("--inner-epochs", type=int, default=20)
    p.add_argument("--targets", default="",
                   help="file of target item ids, one per line")
    p.add_argument("--n-targets", type=int, default=10)
    p.add_argument("--target-seed", type=int, default=13)
    _add_train_flags(p)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("defend", help="train with detection and suppression")
    p.add_argument("--data", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--lambda-mit", type=float, default=0.1)
    p.add_argument("--rank", type=int, default=32)
    p.add_argument("--top-m", type=int, default=50)
    p.add_argument("--ablate-suppression", action="store_true",
                   help="detect then hard-remove flagged items")
    p.add_argument("--ablate-detection", action="store_true",
                   help="suppress random cold items instead of detecting")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_defend)

    p = sub.add_parser("evaluate", help="metrics for a checkpoint on a snapshot")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--label", default="run")
    p.add_argument("--targets", default="")
    p.add_argument("--n-targets", type=int, default=10)
    p.add_argument("--target-seed", type=int, default=13)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run a full experiment from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("schema", help="dump the config schema as JSON")
    p.set_defaults(fn=cmd_schema)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args.fn(args)
    except BudgetError as exc:
        print(f"budget violation: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
