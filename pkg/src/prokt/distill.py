"""Training objectives and loops: plain training, vanilla KD, RCO and ProKT.

Every objective used for training is a mixture of two cross-entropy terms
over one softmax, so a single routine (:func:`mixed_objective`) supplies both
the batch-mean loss and its exact gradient with respect to the logits:

* plain training       H(y, q)
* vanilla KD           (1 - alpha) H(y, q_s) + alpha T^2 H(p_t, q_s)
* student (RCO/ProKT)  (1 - alpha) H(y, q_s) + alpha H(p_t, q_s)
* ProKT teacher        (1 - lambda) H(y, p_t) + lambda H(q_s, p_t)

A term whose weight is exactly zero is skipped rather than multiplied by zero,
which is what makes alpha=0 KD and lambda=0 ProKT bit-identical to plain
training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import BatchStream, Dataset
from .models import (
    LayerSpec,
    ModelParams,
    backward,
    forward,
    init_model,
    load_checkpoint,
    logits,
    save_checkpoint,
)
from .numerics import cross_entropy, kl_divergence, one_hot, softmax_t
from .optim import SGD, OptimizerConfig, make_optimizer


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; the run is aborted."""


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    lam: float = 0.5
    temperature: float = 1.0
    eta_s: float = 0.1
    eta_t: float = 0.1
    steps: int = 1000
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    rco_checkpoints: int = 4
    log_every: int = 10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.eta_s < 0 or self.eta_t < 0:
            raise ValueError("learning rates must be non-negative")
        if self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and log_every >= 1 required")
        if self.rco_checkpoints < 0:
            raise ValueError("rco_checkpoints must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if isinstance(d.get("optimizer"), dict):
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        return cls(**d)


@dataclass(frozen=True)
class StepRecord:
    """Metrics after ``step`` updates, measured on the full train/test splits.

    Losses are reported in divergence form (each soft-target cross-entropy
    H(p, q) is replaced by KL(p || q)); this changes the value by the target's
    entropy only, not the gradient, and makes "student matches its target"
    read as zero. ``kl_teacher_student`` is KL(q_s || p_t) against the
    student's current target.
    """

    step: int
    student_loss: float
    teacher_loss: float
    kl_teacher_student: float
    train_acc_s: float
    train_acc_t: float
    test_acc_s: float
    test_acc_t: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class TrainTrajectory:
    method: str
    config: DistillConfig
    records: list[StepRecord]
    student: ModelParams
    teacher: ModelParams | None = None
    checkpoints: list[ModelParams] = field(default_factory=list)
    checkpoint_steps: list[int] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)
    switch_points: list[int] = field(default_factory=list)

    @property
    def final(self) -> StepRecord:
        return self.records[-1]

    def student_losses(self) -> np.ndarray:
        return np.array([r.student_loss for r in self.records])


# --------------------------------------------------------------------------
# Losses on probability rows
# --------------------------------------------------------------------------

def _check_dims(*rows):
    shapes = {np.shape(r) for r in rows}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")


def kd_loss(y, q_s, p_t, alpha: float, T: float = 1.0):
    """(1 - alpha) H(y, q_s) + alpha T^2 H(p_t, q_s); ``q_s`` and ``p_t`` already at temperature T."""
    _check_dims(y, q_s, p_t)
    return (1.0 - alpha) * cross_entropy(y, q_s) + alpha * T * T * cross_entropy(p_t, q_s)


def student_loss(y, q_s, p_t, alpha: float):
    """(1 - alpha) H(y, q_s) + alpha H(p_t, q_s): a student chasing an intermediate target."""
    _check_dims(y, q_s, p_t)
    return (1.0 - alpha) * cross_entropy(y, q_s) + alpha * cross_entropy(p_t, q_s)


def prokt_teacher_loss(y, p_t, q_s_frozen, lam: float):
    """(1 - lambda) H(y, p_t) + lambda H(q_s, p_t), with q_s held constant."""
    _check_dims(y, p_t, q_s_frozen)
    return (1.0 - lam) * cross_entropy(y, p_t) + lam * cross_entropy(q_s_frozen, p_t)


# --------------------------------------------------------------------------
# Batch objectives with logit gradients
# --------------------------------------------------------------------------

def mixed_objective(u, y_onehot, target=None, weight: float = 0.0, T: float = 1.0,
                    scale: float = 1.0, kl_form: bool = False):
    """Batch mean of ``(1-w) H(y, q) + w*scale*H(target, q)`` with q = softmax(u / T).

    Returns ``(loss, dL/du)``. With ``kl_form`` the soft term is reported as
    KL(target || q) instead; the gradient is the same either way.
    """
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[0]
    q = softmax_t(u, T)
    rows = np.zeros(n)
    grad = np.zeros_like(q)
    if weight < 1.0:
        rows = rows + (1.0 - weight) * cross_entropy(y_onehot, q)
        grad = grad + (1.0 - weight) * (q - y_onehot)
    if weight > 0.0:
        if target is None or np.shape(target) != q.shape:
            raise ValueError("soft target missing or of the wrong shape")
        soft = kl_divergence(target, q) if kl_form else cross_entropy(target, q)
        rows = rows + weight * scale * soft
        grad = grad + weight * scale * (q - target)
    return float(np.mean(rows)), grad / (T * n)


def _finite_or_abort(loss: float, grads: ModelParams, what: str):
    if not math.isfinite(loss) or not all(np.all(np.isfinite(a)) for a in grads.arrays()):
        raise TrainingDiverged(f"non-finite {what} (loss={loss})")


def _take_step(params, X, y, target, weight, T, scale, lr, optimizer, what):
    u, cache = forward(params, X)
    loss, dU = mixed_objective(u, one_hot(y, params.spec.n_classes), target, weight, T, scale)
    grads = backward(params, cache, dU)
    _finite_or_abort(loss, grads, what)
    return (optimizer or SGD(lr)).step(params, grads)


def student_step(params_s: ModelParams, batch, p_t_batch, cfg: DistillConfig, optimizer=None,
                 scale: float = 1.0) -> ModelParams:
    """One update on (1 - alpha) H(y, q_s) + alpha*scale*H(p_t, q_s) at temperature T.

    ``p_t_batch`` is a frozen target (already at temperature T). ``scale``
    is 1 for intermediate-target training and T^2 for vanilla KD. Without an
    ``optimizer`` a plain SGD step with rate ``eta_s`` is taken.
    """
    X, y = batch
    return _take_step(params_s, X, y, np.array(p_t_batch, dtype=np.float64), cfg.alpha,
                      cfg.temperature, scale, cfg.eta_s, optimizer, "student gradient")


def teacher_step(params_t: ModelParams, batch, q_s_batch, cfg: DistillConfig, optimizer=None) -> ModelParams:
    """One update on (1 - lambda) H(y, p_t) + lambda H(q_s, p_t) at T = 1.

    ``q_s_batch`` is copied on entry; nothing flows back to the student.
    """
    X, y = batch
    return _take_step(params_t, X, y, np.array(q_s_batch, dtype=np.float64), cfg.lam,
                      1.0, 1.0, cfg.eta_t, optimizer, "teacher gradient")


# --------------------------------------------------------------------------
# Logging
# --------------------------------------------------------------------------

def log_steps(steps: int, every: int) -> set[int]:
    return set(range(0, steps + 1, every)) | {steps}


class _Logger:
    """Computes :class:`StepRecord` rows on the full train and test splits."""

    def __init__(self, data: Dataset, cfg: DistillConfig):
        self.Xtr, self.ytr = data.subset("train")
        self.Xte, self.yte = data.subset("test")
        self.Ytr = one_hot(self.ytr, data.K)
        self.cfg = cfg
        self.records: list[StepRecord] = []

    def _acc(self, params, X, y) -> float:
        return float(np.mean(np.argmax(logits(params, X), axis=1) == y))

    def log(self, step: int, student: ModelParams, teacher: ModelParams | None,
            student_weight: float, student_scale: float, teacher_weight: float):
        cfg = self.cfg
        u_s = logits(student, self.Xtr)
        if teacher is None:
            loss, _ = mixed_objective(u_s, self.Ytr, kl_form=True)
            rec = StepRecord(step, loss, loss, 0.0, *(2 * [self._acc(student, self.Xtr, self.ytr)]),
                             *(2 * [self._acc(student, self.Xte, self.yte)]))
        else:
            u_t = logits(teacher, self.Xtr)
            p_t_T = softmax_t(u_t, cfg.temperature)
            s_loss, _ = mixed_objective(u_s, self.Ytr, p_t_T, student_weight, cfg.temperature,
                                        student_scale, kl_form=True)
            q_s1 = softmax_t(u_s)
            t_loss, _ = mixed_objective(u_t, self.Ytr, q_s1, teacher_weight, kl_form=True)
            kl = float(np.mean(kl_divergence(q_s1, softmax_t(u_t))))
            rec = StepRecord(step, s_loss, t_loss, kl,
                             float(np.mean(np.argmax(u_s, axis=1) == self.ytr)),
                             float(np.mean(np.argmax(u_t, axis=1) == self.ytr)),
                             self._acc(student, self.Xte, self.yte),
                             self._acc(teacher, self.Xte, self.yte))
        for v in (rec.student_loss, rec.teacher_loss, rec.kl_teacher_student):
            if not math.isfinite(v):
                raise TrainingDiverged(f"non-finite loss at step {step}: {rec}")
        self.records.append(rec)


def _require_splits(data: Dataset):
    if data.train_idx.size == 0 or data.test_idx.size == 0:
        raise ValueError("training needs non-empty train and test splits")


def _check_spec(spec: LayerSpec, data: Dataset):
    if spec.n_in != data.d or spec.n_classes != data.K:
        raise ValueError(f"layer sizes {spec.sizes} incompatible with data (d={data.d}, K={data.K})")


# --------------------------------------------------------------------------
# Training loops
# --------------------------------------------------------------------------

def evenly_spaced(steps: int, count: int) -> list[int]:
    """``ceil(steps * j / count)`` for j = 1..count."""
    return [-(-steps * j // count) for j in range(1, count + 1)]


def train_plain(spec: LayerSpec, data: Dataset, cfg: DistillConfig, lr: float | None = None,
                checkpoint_dir=None) -> TrainTrajectory:
    """Minibatch cross-entropy training of one model.

    The learning rate defaults to ``eta_t`` (this is how teachers are
    trained); pass ``lr=cfg.eta_s`` for a student baseline. Snapshots are
    kept at ``rco_checkpoints + 1`` evenly spaced steps, the last being the
    final model, and written to ``checkpoint_dir`` when given. The single
    model fills both the student and teacher columns of each record.
    """
    _require_splits(data)
    _check_spec(spec, data)
    lr = cfg.eta_t if lr is None else lr
    params = init_model(spec, cfg.seed)
    stream = BatchStream(data, cfg.batch_size, cfg.seed)
    opt = make_optimizer(cfg.optimizer, lr)
    logger = _Logger(data, cfg)
    to_log = log_steps(cfg.steps, cfg.log_every)
    snap_at = evenly_spaced(cfg.steps, cfg.rco_checkpoints + 1)
    snaps = []

    def snapshot(step):
        for _ in range(snap_at.count(step)):
            snaps.append(params)

    logger.log(0, params, None, 0.0, 1.0, 0.0)
    snapshot(0)
    for m in range(cfg.steps):
        X, y = stream.next_batch()
        params = _take_step(params, X, y, None, 0.0, 1.0, 1.0, lr, opt, f"gradient at step {m}")
        if m + 1 in to_log:
            logger.log(m + 1, params, None, 0.0, 1.0, 0.0)
        snapshot(m + 1)

    paths = []
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        for j, p in enumerate(snaps):
            paths.append(Path(checkpoint_dir) / f"ckpt_{j:02d}_step{snap_at[j]}.bin")
            save_checkpoint(p, paths[-1])
    return TrainTrajectory("plain", cfg, logger.records, params, params, checkpoints=snaps,
                           checkpoint_steps=snap_at, checkpoint_paths=paths)


def _distill_from_targets(method: str, spec_s: LayerSpec, targets: Sequence[ModelParams], data: Dataset,
                          cfg: DistillConfig, scale: float) -> TrainTrajectory:
    """Student chases a piecewise-constant sequence of frozen teachers.

    The horizon is cut into ``len(targets)`` equal intervals; interval j
    starts at iteration ``ceil(steps * j / len(targets))``.
    """
    _require_splits(data)
    _check_spec(spec_s, data)
    if not targets:
        raise ValueError("at least one target model is required")
    for t in targets:
        if t.spec.n_in != spec_s.n_in or t.spec.n_classes != spec_s.n_classes:
            raise ValueError("target model incompatible with student spec")
    C = len(targets)
    switch = [0] + evenly_spaced(cfg.steps, C)[:-1]

    def target_at(i: int) -> ModelParams:
        j = 0
        while j + 1 < C and switch[j + 1] <= i:
            j += 1
        return targets[j]

    params = init_model(spec_s, cfg.seed)
    stream = BatchStream(data, cfg.batch_size, cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.eta_s)
    logger = _Logger(data, cfg)
    to_log = log_steps(cfg.steps, cfg.log_every)
    last = max(cfg.steps - 1, 0)

    logger.log(0, params, target_at(0), cfg.alpha, scale, 0.0)
    for m in range(cfg.steps):
        X, y = stream.next_batch()
        p_t = softmax_t(logits(target_at(m), X), cfg.temperature)
        params = student_step(params, (X, y), p_t, cfg, opt, scale)
        if m + 1 in to_log:
            # the record at step m+1 measures the student against the target it faces next
            logger.log(m + 1, params, target_at(min(m + 1, last)), cfg.alpha, scale, 0.0)
    return TrainTrajectory(method, cfg, logger.records, params, targets[-1],
                           switch_points=switch[1:])


def train_vanilla_kd(spec_s: LayerSpec, teacher: ModelParams, data: Dataset,
                     cfg: DistillConfig) -> TrainTrajectory:
    """Student trained on the classic KD loss against a fixed, converged teacher."""
    return _distill_from_targets("kd", spec_s, [teacher], data, cfg, cfg.temperature ** 2)


def train_rco(spec_s: LayerSpec, checkpoints: Sequence, data: Dataset, cfg: DistillConfig) -> TrainTrajectory:
    """Route-constrained baseline: a fixed teacher checkpoint per interval.

    ``checkpoints`` are paths or :class:`ModelParams`, ordered by the
    teacher's training step.
    """
    if len(checkpoints) == 0:
        raise ValueError("empty checkpoint list")
    targets = [c if isinstance(c, ModelParams) else load_checkpoint(c) for c in checkpoints]
    return _distill_from_targets("rco", spec_s, targets, data, cfg, 1.0)


def train_prokt(spec_s: LayerSpec, spec_t: LayerSpec, data: Dataset, cfg: DistillConfig,
                on_step: Callable | None = None) -> TrainTrajectory:
    """Teacher and student co-trained: each iteration the teacher takes a step on
    its student-constrained loss, then the student steps toward the new teacher,
    both on the same minibatch. ``lam = 0`` gives unconstrained co-training.
    """
    _require_splits(data)
    _check_spec(spec_s, data)
    _check_spec(spec_t, data)
    student = init_model(spec_s, cfg.seed)
    teacher = init_model(spec_t, cfg.seed)
    stream = BatchStream(data, cfg.batch_size, cfg.seed)
    opt_s = make_optimizer(cfg.optimizer, cfg.eta_s)
    opt_t = make_optimizer(cfg.optimizer, cfg.eta_t)
    logger = _Logger(data, cfg)
    to_log = log_steps(cfg.steps, cfg.log_every)

    logger.log(0, student, teacher, cfg.alpha, 1.0, cfg.lam)
    for m in range(cfg.steps):
        batch = stream.next_batch()
        q_s = softmax_t(logits(student, batch[0]))
        teacher = teacher_step(teacher, batch, q_s, cfg, opt_t)
        p_t = softmax_t(logits(teacher, batch[0]), cfg.temperature)
        student = student_step(student, batch, p_t, cfg, opt_s)
        if on_step is not None:
            on_step(m, student, teacher)
        if m + 1 in to_log:
            logger.log(m + 1, student, teacher, cfg.alpha, 1.0, cfg.lam)
    return TrainTrajectory("prokt", cfg, logger.records, student, teacher)


def with_overrides(cfg: DistillConfig, **kw) -> DistillConfig:
    return replace(cfg, **kw)
