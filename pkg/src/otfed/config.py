"""Experiment configuration: schema, defaults, presets, parsing.

Config files are YAML key-value trees (JSON works too, being a YAML
subset). Unknown keys are rejected by name; every range check lives in the
dataclasses the tree is lowered into. Precedence, lowest to highest:
built-in defaults, --preset overlay, config file, explicit CLI flags.
"""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from .data import TaskConfig
from .errors import ConfigError
from .federation import FederationConfig, MethodSpec, PartitionParams
from .localtrain import LocalTrainConfig
from .ot import OtConfig

METRICS_SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "name": "run",
    "metrics_schema_version": METRICS_SCHEMA_VERSION,
    "rounds": 200,
    "clients": 20,
    "join_ratio": 1.0,
    "seed": 0,
    "rate_set": [0.0, 0.25, 0.5, 0.75],
    "rate_mode": "static",
    "resample_every": 10,
    "rate_assignment": None,
    "method": {
        "dispatch": "transport",
        "local": "anchored",
        "aggregate": "transport",
        "fusion_alpha": 0.5,
    },
    "local": {
        "penalty": 1.0,
        "epochs": 5,
        "lr": 0.001,
        "batch_size": 256,
    },
    "ot": {
        "mode": "sinkhorn",
        "epsilon": None,
        "max_iters": 2000,
        "convergence_tol": 1e-8,
    },
    "model": {"hidden": [32, 32]},
    "task": {
        "kind": "synthetic",
        "classes": 10,
        "dim": 16,
        "samples_per_class": 100,
        "spread": 0.3,
        "images": None,
        "labels": None,
    },
    "partition": {
        "scheme": "dirichlet",
        "beta": 0.1,
        "classes_per_client": 2,
        "domains": 4,
        "shift_scale": 1.0,
    },
    "output": {
        "dir": "runs/latest",
        "metrics_format": "csv",
        "checkpoint_every": 0,
    },
}

# smoke: a seconds-long sanity pass; desk: the documented desk-scale
# deviations (fewer rounds, larger lr, small batches on synthetic data);
# paper: the full-scale defaults above.
PRESETS: dict[str, dict] = {
    "smoke": {
        "rounds": 3,
        "clients": 4,
        "model": {"hidden": [8]},
        "local": {"epochs": 2, "lr": 0.05, "batch_size": 16},
        "task": {"classes": 4, "dim": 8, "samples_per_class": 20},
        "partition": {"scheme": "iid"},
    },
    "desk": {
        "rounds": 50,
        "local": {"lr": 0.05, "batch_size": 32},
    },
    "paper": {},
}


def deep_merge(base: dict, overlay: dict) -> dict:
    """Recursive dict merge; overlay wins, nested dicts merge key-wise."""
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _reject_unknown(tree: dict, schema: dict, prefix: str = "") -> None:
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(schema[key], dict):
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            _reject_unknown(value, schema[key], prefix=path + ".")


def parse_config(source: str | Path | None) -> dict:
    """Load a config tree from a YAML file path, '-'/None for stdin.

    Returns the raw (validated-for-unknown-keys) tree; merge it over the
    defaults with `resolve_config`.
    """
    if source is None or source == "-":
        text, origin = sys.stdin.read(), "<stdin>"
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text, origin = path.read_text(), str(path)
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{origin}:{mark.line + 1}" if mark is not None else origin
        raise ConfigError(f"config parse error at {where}: {exc}") from exc
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError(f"config root must be a mapping, got {type(tree).__name__}")
    _reject_unknown(tree, DEFAULTS)
    return tree


def resolve_config(
    file_tree: dict | None = None,
    preset: str | None = None,
    overrides: dict | None = None,
) -> dict:
    """Defaults <- preset <- config file <- explicit CLI overrides."""
    tree = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"
            )
        tree = deep_merge(tree, PRESETS[preset])
    if file_tree:
        _reject_unknown(file_tree, DEFAULTS)
        tree = deep_merge(tree, file_tree)
    if overrides:
        tree = deep_merge(tree, overrides)
    return tree


@dataclass(frozen=True)
class ExperimentConfig:
    """A federation run plus its output contract."""

    name: str
    federation: FederationConfig
    out_dir: str
    metrics_format: str
    checkpoint_every: int

    def __post_init__(self):
        if self.metrics_format not in ("csv", "jsonl"):
            raise ConfigError(f"metrics_format must be csv or jsonl, got {self.metrics_format!r}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


def _num(tree: dict, path: str, kind, optional: bool = False):
    node = tree
    parts = path.split(".")
    for p in parts[:-1]:
        node = node[p]
    value = node[parts[-1]]
    if value is None:
        if optional:
            return None
        raise ConfigError(f"config key {path!r} must be set")
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {path!r}: cannot read {value!r} as {kind.__name__}") from exc


def build_experiment(tree: dict) -> ExperimentConfig:
    """Lower a fully resolved tree into typed configs (range checks inside)."""
    try:
        method = MethodSpec(
            dispatch=str(tree["method"]["dispatch"]),
            local=str(tree["method"]["local"]),
            aggregate=str(tree["method"]["aggregate"]),
            fusion_alpha=_num(tree, "method.fusion_alpha", float),
        )
        local = LocalTrainConfig(
            penalty=_num(tree, "local.penalty", float),
            epochs=_num(tree, "local.epochs", int),
            lr=_num(tree, "local.lr", float),
            batch_size=_num(tree, "local.batch_size", int),
        )
        ot = OtConfig(
            mode=str(tree["ot"]["mode"]),
            epsilon=_num(tree, "ot.epsilon", float, optional=True),
            max_iters=_num(tree, "ot.max_iters", int),
            convergence_tol=_num(tree, "ot.convergence_tol", float),
        )
        task = TaskConfig(
            kind=str(tree["task"]["kind"]),
            class_count=_num(tree, "task.classes", int),
            dim=_num(tree, "task.dim", int),
            samples_per_class=_num(tree, "task.samples_per_class", int),
            spread=_num(tree, "task.spread", float),
            images=tree["task"]["images"],
            labels=tree["task"]["labels"],
        )
        part = tree["partition"]
        partition = PartitionParams(
            scheme=str(part["scheme"]),
            classes_per_client=None if part["classes_per_client"] is None
            else int(part["classes_per_client"]),
            beta=None if part["beta"] is None else float(part["beta"]),
            domains=None if part["domains"] is None else int(part["domains"]),
            shift_scale=None if part["shift_scale"] is None else float(part["shift_scale"]),
        )
        assignment = tree["rate_assignment"]
        federation = FederationConfig(
            rounds=_num(tree, "rounds", int),
            client_count=_num(tree, "clients", int),
            join_ratio=_num(tree, "join_ratio", float),
            seed=_num(tree, "seed", int),
            hidden_widths=tuple(int(w) for w in tree["model"]["hidden"]),
            rate_set=tuple(float(r) for r in tree["rate_set"]),
            rate_mode=str(tree["rate_mode"]),
            resample_every=_num(tree, "resample_every", int),
            rate_assignment=None if assignment is None
            else tuple(float(r) for r in assignment),
            method=method,
            local=local,
            ot=ot,
            task=task,
            partition=partition,
        )
    except KeyError as exc:
        raise ConfigError(f"config key {exc.args[0]!r} is missing") from exc
    return ExperimentConfig(
        name=str(tree["name"]),
        federation=federation,
        out_dir=str(tree["output"]["dir"]),
        metrics_format=str(tree["output"]["metrics_format"]),
        checkpoint_every=_num(tree, "output.checkpoint_every", int),
    )
