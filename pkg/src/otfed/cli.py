"""Command-line front end: `otfed run <config>` and `otfed suite <name>`.

Metrics stream to CSV or JSONL one row per round (line-buffered, flushed as
each round finishes), the resolved config is echoed into the run directory,
and final models land next to them in the versioned manifest+blob format.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import (
    DEFAULTS,
    METRICS_SCHEMA_VERSION,
    PRESETS,
    ExperimentConfig,
    build_experiment,
    deep_merge,
    parse_config,
    resolve_config,
)
from .errors import ConfigError
from .federation import Federation, RoundRecord
from .nn import save_model

METRICS_FIELDS = [
    "experiment",
    "method",
    "seed",
    "round",
    "global_acc",
    "global_loss",
    "mean_client_acc",
    "mean_drift_sq",
    "mean_ce_loss",
    "mean_sar_loss",
    "n_participants",
]

SUMMARY_WINDOW = 5  # rounds averaged for the end-of-run accuracy

_FEATURE_SHIFT_BASE = {
    "clients": 8,
    "rounds": 50,
    "rate_assignment": [0.5] * 8,
    "method": {"fusion_alpha": 0.7},
    "model": {"hidden": [16, 16]},
    "local": {"penalty": 0.3, "epochs": 25, "lr": 0.1, "batch_size": 16},
    "task": {"classes": 6, "dim": 12, "samples_per_class": 160, "spread": 0.45},
    "partition": {"scheme": "feature_shift", "domains": 4, "shift_scale": 1.0},
}

_LABEL_SKEW_BASE = {
    "clients": 8,
    "rounds": 30,
    "model": {"hidden": [16, 16]},
    "local": {"lr": 0.05, "batch_size": 32},
    "task": {"classes": 10, "dim": 12, "samples_per_class": 60, "spread": 0.3},
    "partition": {"scheme": "dirichlet", "beta": 0.3},
}

SUITES: dict[str, tuple[dict, dict[str, dict]]] = {
    "ablation": (
        _FEATURE_SHIFT_BASE,
        {
            "full": {},
            "fixed_dispatch": {"method": {"dispatch": "fixed_position"}},
            "plain_local": {"method": {"local": "plain"}},
            "positional_agg": {"method": {"aggregate": "positional"}},
        },
    ),
    "proxy": (
        _FEATURE_SHIFT_BASE,
        {
            "historical": {},
            "fixed_position": {"method": {"dispatch": "fixed_position"}},
            "magnitude": {"method": {"dispatch": "magnitude"}},
            "random": {"method": {"dispatch": "random"}},
        },
    ),
    "sparsity": (
        _LABEL_SKEW_BASE,
        {
            "low": {"rate_set": [0.0, 0.125, 0.25, 0.375]},
            "medium": {"rate_set": [0.0, 0.25, 0.5, 0.75]},
            "high": {"rate_set": [0.25, 0.45, 0.65, 0.85]},
            "dynamic": {
                "rate_set": [0.0, 0.25, 0.5, 0.75],
                "rate_mode": "dynamic",
                "resample_every": 10,
            },
        },
    ),
    "heterogeneity": (
        _LABEL_SKEW_BASE,
        {
            "pathological_n4": {
                "partition": {"scheme": "pathological", "classes_per_client": 4}
            },
            "pathological_n6": {
                "partition": {"scheme": "pathological", "classes_per_client": 6}
            },
            "pathological_n8": {
                "partition": {"scheme": "pathological", "classes_per_client": 8}
            },
            "dirichlet_b0.3": {"partition": {"scheme": "dirichlet", "beta": 0.3}},
            "dirichlet_b0.5": {"partition": {"scheme": "dirichlet", "beta": 0.5}},
            "dirichlet_b1.0": {"partition": {"scheme": "dirichlet", "beta": 1.0}},
        },
    ),
}

# a smoke pass shrinks any suite to seconds
_SUITE_SMOKE_ADJUST = {
    "rounds": 4,
    "task": {"samples_per_class": 24},
    "local": {"epochs": 2},
}


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_row(name: str, method: str, seed: int, rec: RoundRecord) -> dict:
    """Flatten one round record into the fixed metrics schema."""
    drifts = [s.drift_sq for s in rec.per_client]
    ces = [s.ce_loss for s in rec.per_client]
    sars = [s.sar_loss for s in rec.per_client]
    return {
        "experiment": name,
        "method": method,
        "seed": seed,
        "round": rec.round,
        "global_acc": rec.global_acc,
        "global_loss": rec.global_loss,
        "mean_client_acc": rec.mean_client_acc,
        "mean_drift_sq": float(np.mean(drifts)),
        "mean_ce_loss": float(np.mean(ces)),
        "mean_sar_loss": float(np.mean(sars)),
        "n_participants": len(rec.participating),
    }


class MetricsWriter:
    """Streams rows to a CSV or JSONL file, flushing per row."""

    def __init__(self, path: Path, fmt: str, append: bool = False):
        if fmt not in ("csv", "jsonl"):
            raise ConfigError(f"metrics format must be csv or jsonl, got {fmt!r}")
        self.fmt = fmt
        fresh = not (append and path.exists())
        self.fh = open(path, "a" if append else "w")
        if fmt == "csv" and fresh:
            self.fh.write(",".join(METRICS_FIELDS) + "\n")
            self.fh.flush()

    def write(self, row: dict) -> None:
        if self.fmt == "csv":
            self.fh.write(",".join(_fmt(row[f]) for f in METRICS_FIELDS) + "\n")
        else:
            self.fh.write(json.dumps({f: row[f] for f in METRICS_FIELDS}) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def run_experiment(exp: ExperimentConfig, echo_tree: dict | None = None) -> tuple[dict, list[dict]]:
    """Play one configured run, writing metrics, config echo, and models.

    Returns (summary, metric rows). The summary accuracy is the mean of
    mean_client_acc over the final SUMMARY_WINDOW rounds.
    """
    out = Path(exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if echo_tree is not None:
        echo = dict(echo_tree)
        echo.setdefault("metrics_schema_version", METRICS_SCHEMA_VERSION)
        (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")

    cfg = exp.federation
    engine = Federation(cfg)
    method = cfg.method.label()
    writer = MetricsWriter(out / f"metrics.{exp.metrics_format}", exp.metrics_format)
    rows = []
    try:
        for rec in engine.rounds():
            row = metrics_row(exp.name, method, cfg.seed, rec)
            writer.write(row)
            rows.append(row)
            if exp.checkpoint_every and (rec.round + 1) % exp.checkpoint_every == 0:
                ckpt = out / "checkpoints"
                ckpt.mkdir(exist_ok=True)
                save_model(engine.global_model, ckpt / f"round_{rec.round + 1:04d}.json")
    finally:
        writer.close()

    models = out / "models"
    models.mkdir(exist_ok=True)
    save_model(engine.global_model, models / "global.json")
    for client in engine.clients:
        sub = engine.personalized_submodel(client.id, cfg.rounds)
        save_model(sub, models / f"client_{client.id:02d}.json")

    window = rows[-min(SUMMARY_WINDOW, len(rows)):]
    summary = {
        "experiment": exp.name,
        "method": method,
        "seed": cfg.seed,
        "rounds": cfg.rounds,
        "final_mean_client_acc": float(np.mean([r["mean_client_acc"] for r in window])),
        "final_global_acc": float(np.mean([r["global_acc"] for r in window])),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary, rows


def run_suite(
    name: str,
    out_dir: str,
    seeds: list[int],
    fmt: str = "csv",
    preset: str | None = None,
) -> list[dict]:
    """Run every cell of a named suite over the given seeds.

    Writes one combined metrics file plus summary.csv at the suite root and
    prints the summary table. Returns the summary rows.
    """
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    base, cells = SUITES[name]
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    combined = MetricsWriter(root / f"metrics.{fmt}", fmt)
    summaries = []
    try:
        for cell, overlay in cells.items():
            per_seed = []
            for seed in seeds:
                tree = resolve_config(deep_merge(base, overlay))
                if preset == "smoke":
                    tree = deep_merge(tree, _SUITE_SMOKE_ADJUST)
                tree = deep_merge(
                    tree,
                    {
                        "name": cell,
                        "seed": seed,
                        "output": {
                            "dir": str(root / cell / f"seed_{seed}"),
                            "metrics_format": fmt,
                        },
                    },
                )
                summary, rows = run_experiment(build_experiment(tree), echo_tree=tree)
                for row in rows:
                    combined.write(row)
                per_seed.append(summary["final_mean_client_acc"])
            summaries.append(
                {
                    "cell": cell,
                    "seeds": len(seeds),
                    "mean_final_acc": float(np.mean(per_seed)),
                    "min_final_acc": float(np.min(per_seed)),
                    "max_final_acc": float(np.max(per_seed)),
                }
            )
    finally:
        combined.close()

    with open(root / "summary.csv", "w") as fh:
        fh.write("cell,seeds,mean_final_acc,min_final_acc,max_final_acc\n")
        for s in summaries:
            fh.write(
                f"{s['cell']},{s['seeds']},{_fmt(s['mean_final_acc'])},"
                f"{_fmt(s['min_final_acc'])},{_fmt(s['max_final_acc'])}\n"
            )
    print(f"suite {name}: {len(cells)} cells x {len(seeds)} seeds")
    print(f"{'cell':<18} {'mean':>8} {'min':>8} {'max':>8}")
    for s in summaries:
        print(
            f"{s['cell']:<18} {s['mean_final_acc']:>8.4f} "
            f"{s['min_final_acc']:>8.4f} {s['max_final_acc']:>8.4f}"
        )
    return summaries


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otfed",
        description="Desk-scale federated learning simulator with "
        "optimal-transport submodel alignment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("config", help="YAML config path, or '-' for stdin")
    suite_p = sub.add_parser("suite", help="run a named experiment suite")
    suite_p.add_argument("name", choices=sorted(SUITES), help="suite to run")

    for p in (run_p, suite_p):
        p.add_argument("--seed", type=int, default=None, help="root seed")
        p.add_argument(
            "--seeds", type=int, default=1, metavar="K",
            help="run K consecutive seeds starting at --seed",
        )
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--format", choices=("csv", "jsonl"), default=None,
                       help="metrics sink format")
        p.add_argument("--preset", choices=sorted(PRESETS), default=None,
                       help="overlay a sizing preset")
    return parser


def _cli_overrides(args) -> dict:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output"] = {"dir": args.out}
    if args.format is not None:
        overrides.setdefault("output", {})["metrics_format"] = args.format
    return overrides


def _command_run(args) -> int:
    file_tree = parse_config(args.config)
    tree = resolve_config(file_tree, preset=args.preset, overrides=_cli_overrides(args))
    base_seed = tree["seed"]
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    started = time.perf_counter()
    if args.seeds == 1:
        summary, _ = run_experiment(build_experiment(tree), echo_tree=tree)
        print(json.dumps(summary, sort_keys=True))
    else:
        root = Path(tree["output"]["dir"])
        for seed in range(base_seed, base_seed + args.seeds):
            seeded = deep_merge(
                tree, {"seed": seed, "output": {"dir": str(root / f"seed_{seed}")}}
            )
            summary, _ = run_experiment(build_experiment(seeded), echo_tree=seeded)
            print(json.dumps(summary, sort_keys=True))
    print(f"done in {time.perf_counter() - started:.1f}s", file=sys.stderr)
    return 0


def _command_suite(args) -> int:
    base_seed = args.seed if args.seed is not None else 0
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    out = args.out if args.out is not None else f"runs/suite_{args.name}"
    run_suite(
        args.name,
        out,
        seeds=list(range(base_seed, base_seed + args.seeds)),
        fmt=args.format or "csv",
        preset=args.preset,
    )
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _command_run(args)
        return _command_suite(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
