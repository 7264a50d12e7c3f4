"""Experiment configuration: a flat dotted-key = value text format with a
typed schema, canonical hashing, and a machine-readable schema dump.

Environment variables never override anything; what the file says is what
runs. A persisted config re-runs to identical serial-mode results.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attack import ClearAttackConfig
from .defense import DefenseConfig
from .errors import ConfigError
from .synth import SyntheticSpec
from .trainer import TrainConfig


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _int_list(s: str) -> list:
    return [int(x) for x in s.split(",") if x.strip()]


def _float_tuple(s: str) -> tuple:
    return tuple(float(x) for x in s.split(",") if x.strip())


# key -> (parser, default); None path default means "synthetic data"
SCHEMA = {
    "data.path": (str, ""),
    "data.synth.users": (int, 500),
    "data.synth.items": (int, 800),
    "data.synth.exponent": (float, 1.2),
    "data.synth.density": (float, 0.025),
    "data.synth.seed": (int, 7),
    "data.synth.groups": (int, 8),
    "data.synth.affinity": (float, 4.0),
    "split.ratios": (_float_tuple, (0.7, 0.1, 0.2)),
    "split.seed": (int, 7),
    "split.per_user": (_bool, True),
    "train.batch_size": (int, 512),
    "train.learning_rate": (float, 0.001),
    "train.epochs": (int, 50),
    "train.optimizer": (str, "adam"),
    "train.seed": (int, 0),
    "train.d": (int, 128),
    "train.layers": (int, 3),
    "train.temperature": (float, 0.2),
    "train.contrastive_weight": (float, 0.1),
    "train.augmentation": (str, "embedding_noise"),
    "train.edge_dropout_rate": (float, 0.1),
    "train.noise_magnitude": (float, 0.1),
    "train.l2_weight": (float, 1e-4),
    "train.patience": (int, 0),          # 0 disables early stopping
    "train.init_target_norm": (float, 1.3),
    "targets.count": (int, 10),
    "targets.seed": (int, 13),
    "attack.method": (str, "none"),      # none | random | clear
    "attack.size": (float, 0.01),
    "attack.alpha": (float, 1.0),
    "attack.outer_iterations": (int, 10),
    "attack.inner_epochs": (int, 20),
    "attack.relax_steps": (int, 30),
    "attack.relax_lr": (float, 0.05),
    "attack.top_k": (int, 50),
    "attack.seed": (int, 0),
    "defense.enabled": (_bool, False),
    "defense.rank": (int, 32),
    "defense.gamma": (float, 1.0),
    "defense.top_m": (int, 50),
    "defense.lambda_mit": (float, 0.1),
    "defense.detection_every": (int, 1),
    "defense.mode": (str, "sim"),        # sim | no_suppression | no_detection
    "defense.random_candidates": (int, 500),
    "eval.k": (int, 50),
    "output.dir": (str, "runs/out"),
    "seeds": (_int_list, [1]),
}


@dataclass
class ExperimentConfig:
    """Resolved experiment settings; see SCHEMA for keys and defaults."""

    values: dict = field(default_factory=dict)

    def __post_init__(self):
        resolved = {k: default for k, (_, default) in SCHEMA.items()}
        for k, v in self.values.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key: {k}")
            resolved[k] = v
        self.values = resolved
        if self.values["attack.method"] not in ("none", "random", "clear"):
            raise ConfigError(f"unknown attack method: {self.values['attack.method']}")

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no such config file: {path}")
        values = {}
        for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {line_no}: expected 'key = value'")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in SCHEMA:
                raise ConfigError(f"line {line_no}: unknown config key: {key}")
            parser, _ = SCHEMA[key]
            try:
                values[key] = parser(val)
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"line {line_no}: bad value for {key}: {exc}")
        return cls(values)

    @classmethod
    def from_overrides(cls, **dotted) -> "ExperimentConfig":
        return cls({k.replace("__", "."): v for k, v in dotted.items()})

    def to_canonical_json(self) -> str:
        ser = {k: (list(v) if isinstance(v, tuple) else v)
               for k, v in self.values.items()}
        return json.dumps(ser, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_canonical_json().encode()).hexdigest()[:12]

    def write(self, path) -> None:
        lines = [f"{k} = {_format(v)}" for k, v in sorted(self.values.items())]
        Path(path).write_text("\n".join(lines) + "\n")

    # typed sub-configs -------------------------------------------------

    def synth_spec(self) -> SyntheticSpec:
        v = self.values
        return SyntheticSpec(users=v["data.synth.users"], items=v["data.synth.items"],
                             exponent=v["data.synth.exponent"],
                             density=v["data.synth.density"], seed=v["data.synth.seed"],
                             groups=v["data.synth.groups"],
                             affinity=v["data.synth.affinity"])

    def train_config(self, seed: int | None = None) -> TrainConfig:
        v = self.values
        return TrainConfig(
            batch_size=v["train.batch_size"], learning_rate=v["train.learning_rate"],
            epochs=v["train.epochs"], optimizer=v["train.optimizer"],
            seed=v["train.seed"] if seed is None else seed,
            d=v["train.d"], layers=v["train.layers"],
            temperature=v["train.temperature"],
            contrastive_weight=v["train.contrastive_weight"],
            augmentation=v["train.augmentation"],
            edge_dropout_rate=v["train.edge_dropout_rate"],
            noise_magnitude=v["train.noise_magnitude"],
            l2_weight=v["train.l2_weight"],
            eval_k=v["eval.k"],
            patience=v["train.patience"] or None,
            init_target_norm=v["train.init_target_norm"],
        )

    def attack_config(self, seed: int | None = None) -> ClearAttackConfig:
        v = self.values
        return ClearAttackConfig(
            alpha=v["attack.alpha"], outer_iterations=v["attack.outer_iterations"],
            inner_epochs=v["attack.inner_epochs"], relax_steps=v["attack.relax_steps"],
            relax_lr=v["attack.relax_lr"], top_k=v["attack.top_k"],
            train_config=self.train_config(seed),
            seed=v["attack.seed"] if seed is None else seed,
        )

    def defense_config(self) -> DefenseConfig:
        v = self.values
        return DefenseConfig(rank=v["defense.rank"], gamma=v["defense.gamma"],
                             top_m=v["defense.top_m"],
                             lambda_mit=v["defense.lambda_mit"],
                             detection_every=v["defense.detection_every"],
                             mode=v["defense.mode"],
                             random_candidates=v["defense.random_candidates"])


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def schema_dump() -> dict:
    """JSON-able description of every config key, its type, and default."""
    names = {int: "int", float: "float", str: "str", _bool: "bool",
             _int_list: "int_list", _float_tuple: "float_tuple"}
    return {k: {"type": names[parser], "default": list(d) if isinstance(d, tuple) else d}
            for k, (parser, d) in SCHEMA.items()}
