import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from prokt import cli
from prokt.distill import DistillConfig, train_plain
from prokt.harness import (
    CURVE_COLUMNS,
    ConfigError,
    apply_overrides,
    build_dataset,
    emit_curves,
    emit_metrics,
    lambda_sweep,
    parse_config,
    read_curves,
    read_metrics,
    recompute_aggregate,
    run_experiment,
    spec_from_dict,
)
from prokt.models import LayerSpec, load_checkpoint, save_checkpoint

REPO = Path(__file__).resolve().parents[1]

MINIMAL = {
    "dataset": {"kind": "blobs", "K": 3, "n_per_class": 20},
    "student": {"sizes": [2, 3]},
    "teacher": {"sizes": [2, 8, 3]},
    "method": "prokt",
}


def small(method="prokt", **cfg):
    d = json.loads(json.dumps(MINIMAL))
    d["method"] = method
    d["config"] = {"steps": 20, "log_every": 5, **cfg}
    d["seeds"] = [1, 2]
    return d


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "run_info.json"}


class TestConfig:
    def test_defaults_filled(self, tmp_path):
        spec = parse_config(write_config(tmp_path, MINIMAL))
        assert spec.config == DistillConfig()
        assert spec.seeds == (0,)
        assert spec.output_dir == "runs"
        assert spec.dataset == {"kind": "blobs", "K": 3, "n_per_class": 20, "d": 2, "spread": 1.0, "seed": None}
        assert spec.student == LayerSpec((2, 3), "tanh")

    def test_typo_rejected(self):
        d = small(lamda=0.5)
        with pytest.raises(ConfigError, match="unknown key: lamda"):
            spec_from_dict(d)

    def test_nested_typo(self):
        d = small()
        d["dataset"]["nosie"] = 0.2
        with pytest.raises(ConfigError, match="unknown key: nosie"):
            spec_from_dict(d)

    def test_prokt0_lambda(self):
        with pytest.raises(ConfigError, match="prokt0 forces lambda=0"):
            spec_from_dict(small("prokt0", **{"lambda": 0.3}))
        assert spec_from_dict(small("prokt0")).config.lam == 0.0

    @pytest.mark.parametrize("mutate, needle", [
        (lambda d: d.pop("student"), "missing key: student"),
        (lambda d: d.update(method="dark"), "method"),
        (lambda d: d["config"].update(steps=1.5), "config.steps"),
        (lambda d: d["config"].update(alpha=2.0), "alpha"),
        (lambda d: d.update(seeds=[]), "seeds"),
        (lambda d: d["dataset"].pop("K"), "dataset.K"),
        (lambda d: d["config"].update(optimizer={"name": "rmsprop"}), "optimizer"),
    ])
    def test_schema_violations(self, mutate, needle):
        d = small()
        mutate(d)
        with pytest.raises(ConfigError, match=needle):
            spec_from_dict(d)

    def test_rco_needs_teacher_source(self):
        d = small("rco")
        d.pop("teacher")
        with pytest.raises(ConfigError, match="rco requires a teacher checkpoint source"):
            spec_from_dict(d)
        d["teacher_checkpoints"] = ["a.ckpt"]
        assert spec_from_dict(d).teacher_checkpoints == ("a.ckpt",)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="nope.json"):
            parse_config(tmp_path / "nope.json")

    def test_shipped_configs_parse(self):
        for path in sorted((REPO / "configs").glob("*.json")):
            parse_config(path)

    def test_overrides_echoed(self):
        spec = apply_overrides(spec_from_dict(small()), seed=9, lam=0.3, alpha=0.8, temperature=2.0)
        echo = spec.to_dict()
        assert echo["seeds"] == [9]
        assert (echo["config"]["lambda"], echo["config"]["alpha"], echo["config"]["temperature"]) == (0.3, 0.8, 2.0)


class TestRun:
    def test_zero_steps_plain(self, tmp_path):
        d = small("plain", steps=0)
        d["seeds"] = [1]
        rep = run_experiment(spec_from_dict(d), tmp_path)
        traj = rep.trajectories()[1]
        assert [r.step for r in traj.records] == [0]
        lines = (tmp_path / "seed_1" / "curves.csv").read_text().splitlines()
        assert lines[0] == ",".join(CURVE_COLUMNS) and len(lines) == 2
        assert rep.aggregate["test_acc_s"]["n"] == 1

    @pytest.mark.parametrize("method", ["plain", "kd", "rco", "prokt", "prokt0"])
    def test_rerun_byte_identical(self, tmp_path, method):
        spec = spec_from_dict(small(method))
        run_experiment(spec, tmp_path / "a")
        run_experiment(spec, tmp_path / "b")
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a == b and "report.json" in a and "seed_2/metrics.jsonl" in a
        assert (tmp_path / "a" / "run_info.json").exists()

    def test_aggregate_recomputes(self, tmp_path):
        d = small("kd")
        d["seeds"] = [1, 2, 3]
        run_experiment(spec_from_dict(d), tmp_path)
        stored, rebuilt = recompute_aggregate(tmp_path)
        for k, v in stored.items():
            assert abs(v["mean"] - rebuilt[k]["mean"]) <= 1e-12
            assert abs(v["stdev"] - rebuilt[k]["stdev"]) <= 1e-12

    def test_failed_seed_isolated(self, tmp_path, monkeypatch):
        import prokt.harness as harness
        from prokt.distill import TrainingDiverged

        real = harness.run_seed

        def flaky(spec, seed, seed_dir=None):
            if seed == 1:
                raise TrainingDiverged("non-finite loss at step 3")
            return real(spec, seed, seed_dir)

        monkeypatch.setattr(harness, "run_seed", flaky)
        rep = run_experiment(spec_from_dict(small("plain")), tmp_path)
        assert [s.seed for s in rep.failed] == [1]
        report = json.loads((tmp_path / "report.json").read_text())
        assert [s["ok"] for s in report["seeds"]] == [False, True]
        assert "step 3" in report["seeds"][0]["error"]
        assert rep.aggregate["test_acc_s"]["n"] == 1

    def test_rco_from_checkpoint_files(self, tmp_path):
        base = spec_from_dict(small("rco"))
        data = build_dataset(base.dataset, 1)
        traj = train_plain(base.teacher, data, replace(base.config, seed=1), checkpoint_dir=tmp_path / "ck")
        d = small("rco")
        d.pop("teacher")
        d["seeds"] = [1]
        d["teacher_checkpoints"] = [str(p) for p in traj.checkpoint_paths]
        from_files = run_experiment(spec_from_dict(d), write=False)
        inline = run_experiment(replace(base, seeds=(1,)), write=False)
        assert from_files.seeds[0].final == inline.seeds[0].final

    def test_kd_from_teacher_file(self, tmp_path):
        base = spec_from_dict(small("kd"))
        data = build_dataset(base.dataset, 2)
        teacher = train_plain(base.teacher, data, replace(base.config, seed=2)).student
        save_checkpoint(teacher, tmp_path / "t.ckpt")
        d = small("kd")
        d["teacher_checkpoint"] = str(tmp_path / "t.ckpt")
        d["seeds"] = [2]
        a = run_experiment(spec_from_dict(d), write=False)
        b = run_experiment(replace(base, seeds=(2,)), write=False)
        assert a.seeds[0].final == b.seeds[0].final


class TestEmit:
    def test_round_trip(self, tmp_path):
        rep = run_experiment(spec_from_dict(small("rco", log_every=3)), write=False)
        traj = rep.trajectories()[1]
        emit_curves(traj, tmp_path / "c.csv")
        emit_metrics(traj, tmp_path / "m.jsonl")
        rows = read_curves(tmp_path / "c.csv")
        assert len(rows) == len(traj.records) == len(read_metrics(tmp_path / "m.jsonl"))
        for row, rec in zip(rows, traj.records):
            assert row["step"] == rec.step
            for c in CURVE_COLUMNS[1:]:
                assert abs(row[c] - getattr(rec, c)) <= 1e-12
        assert read_metrics(tmp_path / "m.jsonl") == traj.records

    def test_unwritable(self, tmp_path):
        traj = run_experiment(spec_from_dict(small("plain", steps=0)), write=False).trajectories()[1]
        with pytest.raises(OSError):
            emit_curves(traj, tmp_path / "missing" / "c.csv")


class TestSweep:
    def test_empty(self):
        with pytest.raises(ConfigError):
            lambda_sweep(spec_from_dict(small()), [], write=False)

    def test_zero_equals_prokt0(self, tmp_path):
        spec = spec_from_dict(small())
        sweep = lambda_sweep(spec, [0], tmp_path / "sw")
        p0 = run_experiment(replace(spec_from_dict(small("prokt0"))), tmp_path / "p0")
        assert sweep.reports[0.0].seeds[0].final == p0.seeds[0].final
        assert sweep.rows[0]["student_test_acc"] == p0.aggregate["test_acc_s"]["mean"]
        a = (tmp_path / "sw" / "lambda_0.0" / "seed_1" / "metrics.jsonl").read_bytes()
        assert a == (tmp_path / "p0" / "seed_1" / "metrics.jsonl").read_bytes()

    def test_table_files(self, tmp_path):
        sweep = lambda_sweep(spec_from_dict(small()), [0, 0.5, 1.0], tmp_path)
        rows = json.loads((tmp_path / "sweep.json").read_text())["rows"]
        assert [r["lambda"] for r in rows] == [0.0, 0.5, 1.0]
        assert rows == sweep.rows
        assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 4


class TestCli:
    def test_missing_config(self, capsys):
        assert cli.main(["distill", "--config", "missing.json"]) == 2
        assert "missing.json" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert cli.main(["distill", "--bogus"]) == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_command(self):
        assert cli.main(["fly"]) == 2

    def test_oracle(self, capsys):
        assert cli.main(["oracle", "--seeds", "100"]) == 0
        out = capsys.readouterr().out
        assert "100/100" in out and out.strip().endswith("PASS")

    def test_distill_and_report(self, tmp_path, capsys):
        cfg = write_config(tmp_path, small("kd"))
        out = tmp_path / "out"
        assert cli.main(["distill", "--config", str(cfg), "--out", str(out), "--lambda", "0.3"]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["spec"]["config"]["lambda"] == 0.3
        assert cli.main(["report", "--out", str(out)]) == 0
        assert "aggregates match" in capsys.readouterr().out

    def test_out_from_environment(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path, small("plain", steps=2))
        monkeypatch.setenv("PROKT_OUT_DIR", str(tmp_path / "env"))
        assert cli.main(["distill", "--config", str(cfg), "--seed", "4"]) == 0
        assert (tmp_path / "env" / "seed_4" / "metrics.jsonl").exists()

    def test_run_failure_exit(self, tmp_path):
        doc = small("plain", eta_s=1e300)
        doc["student"] = {"sizes": [2, 8, 3]}
        cfg = write_config(tmp_path, doc)
        with np.errstate(all="ignore"):
            assert cli.main(["distill", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1

    def test_sweep_gen_train(self, tmp_path, capsys):
        cfg = write_config(tmp_path, small())
        assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"),
                         "--lambda-grid", "0,0.5"]) == 0
        assert (tmp_path / "s" / "sweep.csv").exists()
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
        assert (tmp_path / "g" / "data_seed1.csv").exists()
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "t"), "--seed", "1"]) == 0
        ckpts = sorted((tmp_path / "t" / "teacher_seed_1" / "checkpoints").iterdir())
        assert len(ckpts) == 5
        load_checkpoint(ckpts[-1], expect=LayerSpec((2, 8, 3)))
