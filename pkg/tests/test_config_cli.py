"""Config schema, precedence, metrics sinks, run artifacts, and suites."""
import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from otfed.cli import (
    METRICS_FIELDS,
    SUITES,
    SUMMARY_WINDOW,
    MetricsWriter,
    main,
    metrics_row,
    run_experiment,
    run_suite,
)
from otfed.config import (
    DEFAULTS,
    METRICS_SCHEMA_VERSION,
    PRESETS,
    ExperimentConfig,
    build_experiment,
    deep_merge,
    parse_config,
    resolve_config,
)
from otfed.errors import ConfigError
from otfed.nn import load_model


def _smoke_tree(tmp_path: Path, **extra) -> dict:
    overrides = {
        "name": "smoketest",
        "seed": 5,
        "output": {"dir": str(tmp_path / "run")},
    }
    overrides.update(extra)
    return resolve_config(preset="smoke", overrides=overrides)


def _read_rows(path: Path) -> list[dict]:
    if path.suffix == ".csv":
        with open(path) as fh:
            return [
                {k: (v if k in ("experiment", "method") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)
            ]
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestDeepMerge:
    def test_overlay_wins_and_nests(self):
        base = {"a": 1, "b": {"x": 1, "y": 2}}
        out = deep_merge(base, {"a": 3, "b": {"y": 9}})
        assert out == {"a": 3, "b": {"x": 1, "y": 9}}

    def test_inputs_not_mutated(self):
        base = {"b": {"x": 1}}
        overlay = {"b": {"x": 2}, "c": [1, 2]}
        out = deep_merge(base, overlay)
        out["b"]["x"] = 99
        out["c"].append(3)
        assert base == {"b": {"x": 1}}
        assert overlay == {"b": {"x": 2}, "c": [1, 2]}

    def test_scalar_replaces_mapping(self):
        assert deep_merge({"a": {"x": 1}}, {"a": None}) == {"a": None}


class TestParseConfig:
    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "nope.yaml")

    def test_parse_error_carries_line(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("rounds: [1, 2\n")
        with pytest.raises(ConfigError, match=r"parse error at .*bad\.yaml"):
            parse_config(bad)

    def test_non_mapping_root_rejected(self, tmp_path):
        doc = tmp_path / "list.yaml"
        doc.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            parse_config(doc)

    def test_empty_document_is_empty_tree(self, tmp_path):
        doc = tmp_path / "empty.yaml"
        doc.write_text("")
        assert parse_config(doc) == {}

    def test_unknown_key_named(self, tmp_path):
        doc = tmp_path / "c.yaml"
        doc.write_text("foo: 1\n")
        with pytest.raises(ConfigError, match="'foo'"):
            parse_config(doc)

    def test_nested_unknown_key_named_with_path(self, tmp_path):
        doc = tmp_path / "c.yaml"
        doc.write_text("local:\n  momentum: 0.9\n")
        with pytest.raises(ConfigError, match="'local.momentum'"):
            parse_config(doc)

    def test_section_must_be_mapping(self, tmp_path):
        doc = tmp_path / "c.yaml"
        doc.write_text("local: 5\n")
        with pytest.raises(ConfigError, match="'local' must be a mapping"):
            parse_config(doc)

    def test_reads_stdin(self, monkeypatch):
        monkeypatch.setattr("sys.stdin", io.StringIO("rounds: 3\n"))
        assert parse_config("-") == {"rounds": 3}


class TestResolveAndDefaults:
    def test_empty_document_yields_paper_defaults(self):
        exp = build_experiment(resolve_config({}))
        fed = exp.federation
        assert fed.client_count == 20
        assert fed.rounds == 200
        assert fed.method.fusion_alpha == 0.5
        assert fed.local.penalty == 1.0
        assert fed.local.epochs == 5
        assert fed.local.batch_size == 256
        assert fed.rate_set == (0.0, 0.25, 0.5, 0.75)
        assert fed.join_ratio == 1.0

    def test_precedence_defaults_preset_file_overrides(self):
        tree = resolve_config({"rounds": 7}, preset="smoke", overrides={"seed": 42})
        assert tree["rounds"] == 7  # file beats preset's 3
        assert tree["clients"] == 4  # preset beats default 20
        assert tree["seed"] == 42  # override beats default 0
        assert tree["metrics_schema_version"] == METRICS_SCHEMA_VERSION

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError, match="preset"):
            resolve_config({}, preset="galactic")

    def test_presets_are_known_shapes(self):
        assert set(PRESETS) == {"smoke", "desk", "paper"}
        assert PRESETS["paper"] == {}

    def test_file_tree_validated_against_schema(self):
        with pytest.raises(ConfigError, match="'bogus'"):
            resolve_config({"bogus": 1})


class TestBuildExperiment:
    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(ConfigError, match="fusion_alpha"):
            build_experiment(resolve_config({"method": {"fusion_alpha": 1.5}}))

    def test_unreadable_number_names_key(self):
        with pytest.raises(ConfigError, match="'rounds'"):
            build_experiment(resolve_config({"rounds": "plenty"}))

    def test_missing_key_reported(self):
        tree = resolve_config({})
        del tree["rounds"]
        with pytest.raises(ConfigError, match="missing"):
            build_experiment(tree)

    def test_bad_metrics_format_rejected(self):
        with pytest.raises(ConfigError, match="metrics_format"):
            build_experiment(resolve_config({"output": {"metrics_format": "xml"}}))

    def test_negative_checkpoint_cadence_rejected(self):
        with pytest.raises(ConfigError, match="checkpoint_every"):
            build_experiment(resolve_config({"output": {"checkpoint_every": -1}}))

    def test_rate_assignment_lowered_to_floats(self):
        tree = resolve_config({"clients": 3, "rate_assignment": [0, 0.5, 0.25]})
        exp = build_experiment(tree)
        assert exp.federation.rate_assignment == (0.0, 0.5, 0.25)

    def test_null_sections_rejected_cleanly(self, tmp_path):
        doc = tmp_path / "c.yaml"
        doc.write_text("local:\n")  # YAML null section
        tree = parse_config(doc)  # tolerated at parse time
        assert tree == {"local": None}


class TestMetricsWriter:
    def _row(self, i=0):
        return {
            "experiment": "e",
            "method": "m",
            "seed": 1,
            "round": i,
            "global_acc": 0.5,
            "global_loss": 1.25,
            "mean_client_acc": 0.5,
            "mean_drift_sq": 0.1,
            "mean_ce_loss": 1.0,
            "mean_sar_loss": 0.05,
            "n_participants": 4,
        }

    def test_rejects_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError, match="csv or jsonl"):
            MetricsWriter(tmp_path / "m.parquet", "parquet")

    def test_rows_durable_before_close(self, tmp_path):
        """Per-row flush means an interrupted run still leaves a valid,
        line-delimited file."""
        path = tmp_path / "m.csv"
        writer = MetricsWriter(path, "csv")
        writer.write(self._row(0))
        writer.write(self._row(1))
        lines = path.read_text().splitlines()  # writer never closed
        assert lines[0] == ",".join(METRICS_FIELDS)
        assert len(lines) == 3
        parsed = list(csv.DictReader(io.StringIO("\n".join(lines))))
        assert [p["round"] for p in parsed] == ["0", "1"]
        writer.close()

    def test_jsonl_lines_parse_with_fixed_fields(self, tmp_path):
        path = tmp_path / "m.jsonl"
        writer = MetricsWriter(path, "jsonl")
        writer.write(self._row(3))
        writer.close()
        (line,) = path.read_text().splitlines()
        assert list(json.loads(line)) == METRICS_FIELDS

    def test_append_mode_keeps_single_header(self, tmp_path):
        path = tmp_path / "m.csv"
        w1 = MetricsWriter(path, "csv")
        w1.write(self._row(0))
        w1.close()
        w2 = MetricsWriter(path, "csv", append=True)
        w2.write(self._row(1))
        w2.close()
        lines = path.read_text().splitlines()
        assert lines.count(",".join(METRICS_FIELDS)) == 1
        assert len(lines) == 3


class TestRunExperiment:
    def test_run_writes_all_artifacts(self, tmp_path):
        tree = _smoke_tree(tmp_path)
        summary, rows = run_experiment(build_experiment(tree), echo_tree=tree)
        run_dir = tmp_path / "run"
        assert len(rows) == tree["rounds"] == 3
        metrics = _read_rows(run_dir / "metrics.csv")
        assert len(metrics) == 3
        for row in metrics:
            for field in METRICS_FIELDS:
                assert field in row
                if field not in ("experiment", "method"):
                    assert np.isfinite(float(row[field]))
        echoed = json.loads((run_dir / "config.json").read_text())
        assert echoed["seed"] == 5
        assert echoed["metrics_schema_version"] == METRICS_SCHEMA_VERSION
        stored = json.loads((run_dir / "summary.json").read_text())
        assert stored == pytest.approx(summary)
        global_model = load_model(run_dir / "models" / "global.json")
        assert global_model.dims == [8, 8, 4]
        for cid in range(4):
            load_model(run_dir / "models" / f"client_{cid:02d}.json")

    def test_summary_is_mean_over_final_window(self, tmp_path):
        tree = _smoke_tree(tmp_path, rounds=7)
        summary, rows = run_experiment(build_experiment(tree))
        window = rows[-SUMMARY_WINDOW:]
        assert summary["final_mean_client_acc"] == pytest.approx(
            float(np.mean([r["mean_client_acc"] for r in window]))
        )
        assert summary["final_global_acc"] == pytest.approx(
            float(np.mean([r["global_acc"] for r in window]))
        )

    def test_rerun_is_byte_identical(self, tmp_path):
        tree_a = _smoke_tree(tmp_path / "a")
        tree_b = _smoke_tree(tmp_path / "b")
        run_experiment(build_experiment(tree_a), echo_tree=tree_a)
        run_experiment(build_experiment(tree_b), echo_tree=tree_b)
        a = (tmp_path / "a" / "run" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "run" / "metrics.csv").read_bytes()
        assert a == b

    def test_csv_and_jsonl_numeric_content_identical(self, tmp_path):
        tree_c = _smoke_tree(tmp_path / "c")
        tree_j = _smoke_tree(tmp_path / "j", output={"metrics_format": "jsonl"})
        tree_j = deep_merge(tree_j, {"output": {"dir": str(tmp_path / "j" / "run")}})
        run_experiment(build_experiment(tree_c))
        run_experiment(build_experiment(tree_j))
        csv_rows = _read_rows(tmp_path / "c" / "run" / "metrics.csv")
        jsonl_rows = _read_rows(tmp_path / "j" / "run" / "metrics.jsonl")
        assert len(csv_rows) == len(jsonl_rows)
        for cr, jr in zip(csv_rows, jsonl_rows):
            for field in METRICS_FIELDS:
                if field in ("experiment", "method"):
                    assert cr[field] == jr[field]
                else:
                    assert float(cr[field]) == float(jr[field]), field

    def test_config_echo_replays_exactly(self, tmp_path):
        tree = _smoke_tree(tmp_path)
        run_experiment(build_experiment(tree), echo_tree=tree)
        echoed = parse_config(tmp_path / "run" / "config.json")
        replay = deep_merge(echoed, {"output": {"dir": str(tmp_path / "replay")}})
        run_experiment(build_experiment(resolve_config(replay)))
        original = (tmp_path / "run" / "metrics.csv").read_bytes()
        replayed = (tmp_path / "replay" / "metrics.csv").read_bytes()
        assert original == replayed

    def test_checkpoints_written_at_cadence(self, tmp_path):
        tree = _smoke_tree(tmp_path, rounds=4, output={"checkpoint_every": 2})
        tree = deep_merge(tree, {"output": {"dir": str(tmp_path / "run")}})
        run_experiment(build_experiment(tree))
        ckpts = sorted((tmp_path / "run" / "checkpoints").glob("*.json"))
        assert [p.name for p in ckpts] == ["round_0002.json", "round_0004.json"]
        load_model(ckpts[0])


class TestSuites:
    def test_suite_names(self):
        assert set(SUITES) == {"ablation", "proxy", "sparsity", "heterogeneity"}

    def test_ablation_suite_has_exactly_four_method_cells(self):
        _, cells = SUITES["ablation"]
        assert list(cells) == ["full", "fixed_dispatch", "plain_local", "positional_agg"]
        assert cells["fixed_dispatch"] == {"method": {"dispatch": "fixed_position"}}
        assert cells["plain_local"] == {"method": {"local": "plain"}}
        assert cells["positional_agg"] == {"method": {"aggregate": "positional"}}

    def test_proxy_suite_cells(self):
        _, cells = SUITES["proxy"]
        assert list(cells) == ["historical", "fixed_position", "magnitude", "random"]
        assert cells["historical"] == {}

    def test_sparsity_suite_rate_sets(self):
        _, cells = SUITES["sparsity"]
        assert cells["low"]["rate_set"] == [0.0, 0.125, 0.25, 0.375]
        assert cells["medium"]["rate_set"] == [0.0, 0.25, 0.5, 0.75]
        assert cells["high"]["rate_set"] == [0.25, 0.45, 0.65, 0.85]
        assert cells["dynamic"]["rate_mode"] == "dynamic"

    def test_heterogeneity_suite_covers_both_skews(self):
        _, cells = SUITES["heterogeneity"]
        schemes = {c["partition"]["scheme"] for c in cells.values()}
        assert schemes == {"pathological", "dirichlet"}

    def test_every_cell_tree_resolves(self):
        for name, (base, cells) in SUITES.items():
            for cell, overlay in cells.items():
                exp = build_experiment(resolve_config(deep_merge(base, overlay)))
                assert isinstance(exp, ExperimentConfig), f"{name}/{cell}"

    def test_unknown_suite_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown suite"):
            run_suite("banquet", str(tmp_path), seeds=[0])


class TestMainCli:
    def test_run_command_end_to_end(self, tmp_path, capsys):
        cfg = tmp_path / "exp.yaml"
        cfg.write_text("name: demo\nrounds: 2\n")
        out = tmp_path / "out"
        code = main(
            ["run", str(cfg), "--preset", "smoke", "--seed", "9", "--out", str(out),
             "--format", "jsonl"]
        )
        assert code == 0
        summary = json.loads(capsys.readouterr().out.splitlines()[0])
        assert summary["experiment"] == "demo"
        assert summary["seed"] == 9
        assert summary["rounds"] == 2
        assert len(_read_rows(out / "metrics.jsonl")) == 2

    def test_run_multi_seed_layout(self, tmp_path, capsys):
        cfg = tmp_path / "exp.yaml"
        cfg.write_text("rounds: 2\n")
        out = tmp_path / "multi"
        code = main(
            ["run", str(cfg), "--preset", "smoke", "--seed", "3", "--seeds", "2",
             "--out", str(out)]
        )
        assert code == 0
        assert (out / "seed_3" / "metrics.csv").exists()
        assert (out / "seed_4" / "metrics.csv").exists()
        summaries = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert [s["seed"] for s in summaries] == [3, 4]

    def test_config_errors_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("widgets: 3\n")
        assert main(["run", str(cfg)]) == 2
        assert "error:" in capsys.readouterr().err

    def test_bad_seed_count_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "exp.yaml"
        cfg.write_text("rounds: 2\n")
        assert main(["run", str(cfg), "--preset", "smoke", "--seeds", "0"]) == 2
        assert "--seeds" in capsys.readouterr().err

    def test_suite_command_smoke(self, tmp_path, capsys):
        out = tmp_path / "suite"
        code = main(
            ["suite", "sparsity", "--preset", "smoke", "--seed", "1", "--out", str(out)]
        )
        assert code == 0
        printed = capsys.readouterr().out
        assert "suite sparsity: 4 cells x 1 seeds" in printed
        combined = _read_rows(out / "metrics.csv")
        assert len(combined) == 4 * 4  # cells x smoke rounds
        table = (out / "summary.csv").read_text().splitlines()
        assert table[0] == "cell,seeds,mean_final_acc,min_final_acc,max_final_acc"
        assert len(table) == 5
        for cell in ("low", "medium", "high", "dynamic"):
            assert (out / cell / "seed_1" / "config.json").exists()
            assert (out / cell / "seed_1" / "summary.json").exists()
