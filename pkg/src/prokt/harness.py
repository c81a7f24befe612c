"""Experiment configuration, orchestration and report files.

A run is described by a strict JSON document (see README for the schema and
defaults). :func:`run_experiment` trains one method over a list of seeds and
writes, per seed, a JSON-lines metrics file, a CSV curve file and final
checkpoints, plus a ``report.json`` with aggregates. Everything except
``run_info.json`` (wall-clock timestamps) is a deterministic function of the
config and seeds.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import Dataset, combine_splits, gen_blobs, gen_rings, load_csv, load_idx
from .distill import (
    DistillConfig,
    TrainingDiverged,
    TrainTrajectory,
    StepRecord,
    train_plain,
    train_prokt,
    train_rco,
    train_vanilla_kd,
)
from .models import LayerSpec, load_checkpoint, save_checkpoint
from .optim import OptimizerConfig

log = logging.getLogger(__name__)

METHODS = ("plain", "kd", "rco", "prokt", "prokt0")
CURVE_COLUMNS = ("step", "student_loss", "teacher_loss", "kl_teacher_student", "train_acc_t", "test_acc_s")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Config schema
# --------------------------------------------------------------------------

# kind -> (required keys, optional keys with defaults)
DATASET_SCHEMA = {
    "blobs": ({"K", "n_per_class"}, {"d": 2, "spread": 1.0, "seed": None}),
    "rings": ({"K", "n_per_class"}, {"noise": 0.1, "seed": None}),
    "csv": ({"path", "label_column"}, {"seed": None}),
    "idx": ({"train_images", "train_labels", "test_images", "test_labels"}, {}),
}
LAYER_KEYS = {"sizes", "activation"}
OPTIMIZER_KEYS = {"name", "momentum", "beta1", "beta2", "eps"}
CONFIG_KEYS = {"alpha", "lambda", "temperature", "eta_s", "eta_t", "steps", "batch_size",
               "optimizer", "rco_checkpoints", "log_every"}
TOP_KEYS = {"dataset", "teacher", "student", "method", "config", "seeds", "output_dir",
            "teacher_checkpoints", "teacher_checkpoint"}
REQUIRED_TOP = {"dataset", "student", "method"}


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: dict
    student: LayerSpec
    teacher: LayerSpec | None
    method: str
    config: DistillConfig
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    teacher_checkpoints: tuple[str, ...] = ()
    teacher_checkpoint: str | None = None

    def to_dict(self) -> dict:
        """Spec echo written into reports (output location excluded)."""
        cfg = self.config.to_dict()
        cfg.pop("seed")
        d = {
            "dataset": dict(self.dataset),
            "student": {"sizes": list(self.student.sizes), "activation": self.student.activation},
            "teacher": None if self.teacher is None else
            {"sizes": list(self.teacher.sizes), "activation": self.teacher.activation},
            "method": self.method,
            "config": cfg,
            "seeds": list(self.seeds),
        }
        if self.teacher_checkpoints:
            d["teacher_checkpoints"] = list(self.teacher_checkpoints)
        if self.teacher_checkpoint:
            d["teacher_checkpoint"] = self.teacher_checkpoint
        return d


def _unknown(d: dict, allowed: set, where: str):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown key: {k}" + (f" (in {where})" if where else ""))


def _need_dict(v, where: str) -> dict:
    if not isinstance(v, dict):
        raise ConfigError(f"{where} must be an object")
    return v


def _number(v, where: str, integer: bool = False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
        raise ConfigError(f"{where} must be {'an integer' if integer else 'a number'}, got {v!r}")
    return v


def _layer(v, where: str) -> LayerSpec:
    v = _need_dict(v, where)
    _unknown(v, LAYER_KEYS, where)
    if "sizes" not in v:
        raise ConfigError(f"missing key: {where}.sizes")
    sizes = v["sizes"]
    if not isinstance(sizes, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in sizes):
        raise ConfigError(f"{where}.sizes must be a list of integers")
    try:
        return LayerSpec(tuple(sizes), v.get("activation", "tanh"))
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def _dataset(v) -> dict:
    v = _need_dict(v, "dataset")
    kind = v.get("kind")
    if kind not in DATASET_SCHEMA:
        raise ConfigError(f"dataset.kind must be one of {sorted(DATASET_SCHEMA)}, got {kind!r}")
    required, optional = DATASET_SCHEMA[kind]
    _unknown(v, required | set(optional) | {"kind"}, "dataset")
    for k in sorted(required - set(v)):
        raise ConfigError(f"missing key: dataset.{k}")
    out = {"kind": kind, **optional, **v}
    for k in ("K", "n_per_class", "d"):
        if k in out:
            _number(out[k], f"dataset.{k}", integer=True)
    for k in ("spread", "noise"):
        if k in out:
            _number(out[k], f"dataset.{k}")
    if out.get("seed") is not None:
        _number(out["seed"], "dataset.seed", integer=True)
    return out


def _distill_config(v, method: str) -> DistillConfig:
    v = dict(_need_dict(v, "config"))
    _unknown(v, CONFIG_KEYS, "config")
    for k in CONFIG_KEYS - {"optimizer"}:
        if k in v:
            _number(v[k], f"config.{k}", integer=k in ("steps", "batch_size", "rco_checkpoints", "log_every"))
    if method == "prokt0":
        if v.get("lambda", 0) != 0:
            raise ConfigError("prokt0 forces lambda=0")
        v["lambda"] = 0.0
    if "optimizer" in v:
        o = _need_dict(v["optimizer"], "config.optimizer")
        _unknown(o, OPTIMIZER_KEYS, "config.optimizer")
        try:
            v["optimizer"] = OptimizerConfig(**o)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"config.optimizer: {e}") from None
    try:
        return DistillConfig.from_dict(v)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config: {e}") from None


def spec_from_dict(d: dict) -> ExperimentSpec:
    d = _need_dict(d, "config document")
    _unknown(d, TOP_KEYS, "")
    for k in sorted(REQUIRED_TOP - set(d)):
        raise ConfigError(f"missing key: {k}")
    method = d["method"]
    if method not in METHODS:
        raise ConfigError(f"method must be one of {list(METHODS)}, got {method!r}")
    student = _layer(d["student"], "student")
    teacher = _layer(d["teacher"], "teacher") if d.get("teacher") is not None else None
    ckpts = d.get("teacher_checkpoints") or []
    if not isinstance(ckpts, list) or not all(isinstance(p, str) for p in ckpts):
        raise ConfigError("teacher_checkpoints must be a list of paths")
    if method in ("prokt", "prokt0") and teacher is None:
        raise ConfigError(f"method {method} needs a teacher layer spec")
    if method == "kd" and teacher is None and not d.get("teacher_checkpoint"):
        raise ConfigError("kd needs a teacher layer spec or teacher_checkpoint")
    if method == "rco" and teacher is None and not ckpts:
        raise ConfigError("rco requires a teacher checkpoint source (teacher spec or teacher_checkpoints)")
    seeds = d.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("seeds must be a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    out = d.get("output_dir", "runs")
    if not isinstance(out, str):
        raise ConfigError("output_dir must be a string")
    return ExperimentSpec(
        dataset=_dataset(d["dataset"]), student=student, teacher=teacher, method=method,
        config=_distill_config(d.get("config", {}), method), seeds=tuple(seeds), output_dir=out,
        teacher_checkpoints=tuple(ckpts), teacher_checkpoint=d.get("teacher_checkpoint"))


def parse_config(path) -> ExperimentSpec:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return spec_from_dict(doc)


def apply_overrides(spec: ExperimentSpec, seed=None, method=None, lam=None, alpha=None,
                    temperature=None, output_dir=None) -> ExperimentSpec:
    """CLI flag overrides, validated with the same rules as the config file."""
    d = spec.to_dict()
    d["output_dir"] = output_dir if output_dir is not None else spec.output_dir
    if spec.teacher is None:
        d.pop("teacher")
    if seed is not None:
        d["seeds"] = [seed]
    if method is not None:
        d["method"] = method
    for key, val in (("lambda", lam), ("alpha", alpha), ("temperature", temperature)):
        if val is not None:
            d["config"][key] = val
    if d["method"] == "prokt0" and lam is None:
        d["config"]["lambda"] = 0.0
    return spec_from_dict(d)


# --------------------------------------------------------------------------
# Running
# --------------------------------------------------------------------------

def build_dataset(block: dict, seed: int) -> Dataset:
    kind = block["kind"]
    ds_seed = seed if block.get("seed") is None else block["seed"]
    try:
        if kind == "blobs":
            return gen_blobs(block["K"], block["n_per_class"], block["d"], block["spread"], ds_seed)
        if kind == "rings":
            return gen_rings(block["K"], block["n_per_class"], block["noise"], ds_seed)
        if kind == "csv":
            return load_csv(block["path"], block["label_column"], seed=ds_seed)
        train = load_idx(block["train_images"], block["train_labels"], split="train")
        test = load_idx(block["test_images"], block["test_labels"], split="test")
        return combine_splits(train, test)
    except FileNotFoundError as e:
        raise ConfigError(f"dataset file not found: {e.filename}") from None


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def emit_metrics(traj: TrainTrajectory, path) -> None:
    """One JSON object per logged step."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in traj.records:
            fh.write(json.dumps(r.as_dict(), sort_keys=True, allow_nan=False) + "\n")


def emit_curves(traj: TrainTrajectory, path) -> None:
    """Per-step CSV for external plotting; floats are written with repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in traj.records:
            w.writerow([r.step] + [repr(float(getattr(r, c))) for c in CURVE_COLUMNS[1:]])


def read_curves(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def read_metrics(path) -> list[StepRecord]:
    with open(path, encoding="utf-8") as fh:
        return [StepRecord(**json.loads(line)) for line in fh if line.strip()]


@dataclass
class SeedResult:
    seed: int
    ok: bool
    error: str | None = None
    final: dict | None = None
    teacher_pretrain: dict | None = None
    trajectory: TrainTrajectory | None = field(default=None, repr=False)

    def summary(self) -> dict:
        d = {"seed": self.seed, "ok": self.ok}
        if self.error:
            d["error"] = self.error
        if self.final is not None:
            d["final"] = self.final
        if self.teacher_pretrain is not None:
            d["teacher_pretrain"] = self.teacher_pretrain
        return d


@dataclass
class RunReport:
    spec: dict
    seeds: list[SeedResult]
    aggregate: dict
    out_dir: Path | None = None

    @property
    def failed(self) -> list[SeedResult]:
        return [s for s in self.seeds if not s.ok]

    def trajectories(self) -> dict[int, TrainTrajectory]:
        return {s.seed: s.trajectory for s in self.seeds if s.trajectory is not None}

    def to_dict(self) -> dict:
        return {"spec": self.spec, "seeds": [s.summary() for s in self.seeds], "aggregate": self.aggregate}


AGG_FIELDS = ("test_acc_s", "train_acc_s", "test_acc_t", "train_acc_t", "student_loss", "kl_teacher_student")


def aggregate(finals: list[dict]) -> dict:
    out = {}
    for f in AGG_FIELDS:
        vals = [r[f] for r in finals]
        out[f] = {
            "mean": statistics.fmean(vals) if vals else None,
            "stdev": statistics.stdev(vals) if len(vals) > 1 else 0.0,
            "n": len(vals),
        }
    return out


def _teacher_for(spec: ExperimentSpec, data: Dataset, cfg: DistillConfig, seed_dir: Path | None):
    """Converged teacher (kd) or its checkpoint sequence (rco), loaded or trained here."""
    if spec.method == "kd" and spec.teacher_checkpoint:
        return load_checkpoint(spec.teacher_checkpoint), None
    if spec.method == "rco" and spec.teacher_checkpoints:
        return list(spec.teacher_checkpoints), None
    ckpt_dir = None if seed_dir is None else seed_dir / "teacher_checkpoints"
    traj = train_plain(spec.teacher, data, cfg, lr=cfg.eta_t, checkpoint_dir=ckpt_dir)
    pre = traj.final.as_dict()
    if spec.method == "kd":
        return traj.student, pre
    return (traj.checkpoint_paths or traj.checkpoints), pre


def run_seed(spec: ExperimentSpec, seed: int, seed_dir: Path | None = None) -> SeedResult:
    cfg = replace(spec.config, seed=seed)
    data = build_dataset(spec.dataset, seed)
    pre = None
    if spec.method == "plain":
        traj = train_plain(spec.student, data, cfg, lr=cfg.eta_s)
    elif spec.method == "kd":
        teacher, pre = _teacher_for(spec, data, cfg, seed_dir)
        traj = train_vanilla_kd(spec.student, teacher, data, cfg)
    elif spec.method == "rco":
        ckpts, pre = _teacher_for(spec, data, cfg, seed_dir)
        traj = train_rco(spec.student, ckpts, data, cfg)
    else:
        traj = train_prokt(spec.student, spec.teacher, data, cfg)
    if seed_dir is not None:
        emit_metrics(traj, seed_dir / "metrics.jsonl")
        emit_curves(traj, seed_dir / "curves.csv")
        save_checkpoint(traj.student, seed_dir / "student.ckpt")
        if traj.teacher is not None and spec.method != "plain":
            save_checkpoint(traj.teacher, seed_dir / "teacher.ckpt")
    return SeedResult(seed, True, final=traj.final.as_dict(), teacher_pretrain=pre, trajectory=traj)


def run_experiment(spec: ExperimentSpec, out_dir=None, write: bool = True) -> RunReport:
    """Train ``spec.method`` once per seed and write the report files.

    A seed whose training diverges is recorded as failed; the remaining
    seeds still run. Results are merged in seed order, so the report does not
    depend on execution order.
    """
    out = Path(out_dir if out_dir is not None else spec.output_dir) if write else None
    started = time.time()
    results: dict[int, SeedResult] = {}
    for seed in spec.seeds:
        seed_dir = None
        if out is not None:
            seed_dir = out / f"seed_{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
        try:
            results[seed] = run_seed(spec, seed, seed_dir)
        except (TrainingDiverged, FloatingPointError) as e:
            log.error("seed %d failed: %s", seed, e)
            results[seed] = SeedResult(seed, False, error=str(e))
    ordered = [results[s] for s in sorted(results)]
    report = RunReport(spec.to_dict(), ordered, aggregate([r.final for r in ordered if r.ok]), out)
    if out is not None:
        (out / "report.json").write_text(_dumps(report.to_dict()), encoding="utf-8")
        (out / "run_info.json").write_text(_dumps(
            {"started_unix": started, "finished_unix": time.time()}), encoding="utf-8")
    return report


@dataclass
class SweepReport:
    rows: list[dict]
    reports: dict[float, RunReport]

    def to_dict(self) -> dict:
        return {"rows": self.rows}


def lambda_sweep(spec: ExperimentSpec, lambda_values, out_dir=None, write: bool = True) -> SweepReport:
    """One ProKT experiment per lambda; tabulates mean student/teacher accuracy."""
    values = [float(v) for v in lambda_values]
    if not values:
        raise ConfigError("lambda grid is empty")
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ConfigError("lambda values must lie in [0, 1]")
    if spec.teacher is None:
        raise ConfigError("lambda sweep needs a teacher layer spec")
    out = Path(out_dir if out_dir is not None else spec.output_dir) if write else None
    rows, reports = [], {}
    for lam in values:
        s = replace(spec, method="prokt", config=replace(spec.config, lam=lam))
        rep = run_experiment(s, None if out is None else out / f"lambda_{lam!r}", write=write)
        reports[lam] = rep
        agg = rep.aggregate
        rows.append({
            "lambda": lam,
            "student_test_acc": agg["test_acc_s"]["mean"],
            "student_train_acc": agg["train_acc_s"]["mean"],
            "teacher_test_acc": agg["test_acc_t"]["mean"],
            "teacher_train_acc": agg["train_acc_t"]["mean"],
            "failed_seeds": len(rep.failed),
        })
    sweep = SweepReport(rows, reports)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(_dumps(sweep.to_dict()), encoding="utf-8")
        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return sweep


def recompute_aggregate(out_dir) -> tuple[dict, dict]:
    """(stored aggregate, aggregate rebuilt from the per-seed metrics files)."""
    out = Path(out_dir)
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    finals = []
    for s in report["seeds"]:
        if s["ok"]:
            finals.append(read_metrics(out / f"seed_{s['seed']}" / "metrics.jsonl")[-1].as_dict())
    return report["aggregate"], aggregate(finals)
