"""Mirror descent on output distributions, solved exactly where possible.

One iteration has two steps:

1. trust-region improvement: for each example, the distribution ``p``
   minimising ``-log p_y`` subject to ``KL(q || p) <= epsilon``;
2. KL projection of those targets back onto the student family.

For the tabular family (every table of categorical rows) the projection is
the identity, so the classification loss can only go down. For a parametric
family the projection is an inner gradient loop and only approximate.

Step 1 has a one-parameter closed form. Stationarity of the Lagrangian gives
``p_i = (beta q_i + [i == y]) / (beta + 1)`` with ``beta >= 0``; KL(q || p)
decreases monotonically in ``beta`` from infinity (one-hot) to 0 (``p = q``),
so ``beta`` is pinned by bisection on ``KL(q || p(beta)) = epsilon``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ModelParams, backward, forward, logits
from .numerics import cross_entropy, kl_divergence, one_hot, softmax_t

BISECTION_ITERS = 200
MAX_DOUBLINGS = 2000


@dataclass(frozen=True, eq=False)
class TabularProblem:
    labels: np.ndarray  # integer class per example
    q_s: np.ndarray  # n x K current student table
    epsilon: float

    def __post_init__(self):
        q = np.asarray(self.q_s, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != len(self.labels):
            raise ValueError("q_s must be n x K with one row per label")
        if np.any(q < 0) or np.max(np.abs(q.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("every q_s row must lie on the simplex")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "q_s", q)
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))

    @property
    def n_examples(self) -> int:
        return self.q_s.shape[0]

    @property
    def K(self) -> int:
        return self.q_s.shape[1]


@dataclass(frozen=True)
class FamilyHandle:
    """Which student family the projection step maps onto.

    ``kind`` is ``"tabular"`` or ``"parametric"``; the latter runs
    ``steps`` plain gradient steps at ``rate`` on mean KL(target || model).
    """

    kind: str = "tabular"
    steps: int = 50
    rate: float = 0.1

    def __post_init__(self):
        if self.kind not in ("tabular", "parametric"):
            raise ValueError(f"unknown family {self.kind!r}")
        if self.kind == "parametric" and not (self.steps > 0 and self.rate > 0):
            raise ValueError("parametric projection needs positive steps and rate")


TABULAR = FamilyHandle("tabular")


def _mix(q: np.ndarray, y: int, beta: float) -> np.ndarray:
    p = beta * q
    p[y] += 1.0
    return p / (beta + 1.0)


def _kl_to_mix(q: np.ndarray, y: int, beta: float) -> float:
    """KL(q || p(beta)) evaluated with log1p for accuracy as p -> q."""
    if beta == 0.0:
        return 0.0 if q[y] == 1.0 else np.inf
    mask = q > 0
    # log(q_i / p_i) = log1p(1/beta) for i != y, and for y:
    # log(q_y (beta+1) / (beta q_y + 1)) = log1p(1/beta) - log1p(1/(beta q_y))
    ratio = np.full(q.shape, np.log1p(1.0 / beta))
    ratio[y] -= np.log1p(1.0 / (beta * q[y])) if q[y] > 0 else np.inf
    return float(max(np.sum(q[mask] * ratio[mask]), 0.0))


def solve_beta(q, y: int, epsilon: float) -> float:
    """Multiplier ``beta`` with KL(q || p(beta)) = epsilon, to bisection precision.

    Returns 0.0 when the one-hot at ``y`` already satisfies the constraint.
    Always runs :data:`BISECTION_ITERS` halvings, so results are reproducible
    bit for bit.
    """
    q = np.asarray(q, dtype=np.float64)
    if _kl_to_mix(q, y, 0.0) <= epsilon:
        return 0.0
    hi = 1.0
    for _ in range(MAX_DOUBLINGS):
        if _kl_to_mix(q, y, hi) < epsilon:
            break
        hi *= 2.0
    else:
        raise RuntimeError("could not bracket the trust-region multiplier")
    lo = 0.0
    for _ in range(BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        if _kl_to_mix(q, y, mid) <= epsilon:
            hi = mid
        else:
            lo = mid
    return hi  # feasible end of the bracket


def constrained_step(q, y_class: int, epsilon: float) -> np.ndarray:
    """argmin_p -log p_y subject to KL(q || p) <= epsilon."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    q = np.asarray(q, dtype=np.float64)
    if not 0 <= y_class < q.size:
        raise ValueError(f"class {y_class} out of range")
    if epsilon == 0.0:
        return q.copy()
    beta = solve_beta(q, y_class, epsilon)
    if beta == 0.0:
        return one_hot([y_class], q.size)[0]
    return _mix(q.copy(), y_class, beta)


def constrained_targets(q_table, labels, epsilon: float) -> np.ndarray:
    """Row-wise :func:`constrained_step`; rows are independent of each other."""
    return np.stack([constrained_step(q, int(y), epsilon) for q, y in zip(q_table, labels)])


@dataclass(eq=False)
class Projection:
    member: np.ndarray | ModelParams
    kl_before: float
    kl_after: float


def kl_project(targets, family: FamilyHandle = TABULAR, inputs=None,
               params: ModelParams | None = None) -> Projection:
    """argmin over the family of mean KL(target || member).

    Tabular: the targets themselves. Parametric: ``family.steps`` gradient
    steps from ``params`` on ``inputs``; the achieved KL is reported, not
    assumed to be zero.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if family.kind == "tabular":
        return Projection(targets.copy(), 0.0, 0.0)
    if params is None or inputs is None:
        raise ValueError("parametric projection needs params and inputs")
    n = targets.shape[0]
    kl_before = float(np.mean(kl_divergence(targets, softmax_t(logits(params, inputs)))))
    for _ in range(family.steps):
        u, cache = forward(params, inputs)
        loss = float(np.mean(kl_divergence(targets, softmax_t(u))))
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite projection loss")
        g = backward(params, cache, (softmax_t(u) - targets) / n)
        params = ModelParams.from_arrays(
            params.spec, [p - family.rate * d for p, d in zip(params.arrays(), g.arrays())])
    kl_after = float(np.mean(kl_divergence(targets, softmax_t(logits(params, inputs)))))
    if not np.isfinite(kl_after):
        raise FloatingPointError("non-finite projection loss")
    return Projection(params, kl_before, kl_after)


@dataclass(eq=False)
class MirrorRun:
    losses: list[float]  # mean H(y, q_s), index 0 = before any iteration
    projection_kl: list[float] = field(default_factory=list)
    q_s: np.ndarray | None = None
    params: ModelParams | None = None


def _mean_ce(labels, q) -> float:
    return float(np.mean(cross_entropy(one_hot(labels, q.shape[1]), q)))


def mirror_descent_run(problem: TabularProblem, family: FamilyHandle = TABULAR, steps: int = 50,
                       inputs=None, params: ModelParams | None = None) -> MirrorRun:
    """Alternate trust-region targets and KL projection ``steps`` times.

    For a parametric family, ``params`` and ``inputs`` define the current
    student and ``problem.q_s`` is ignored in favour of its outputs.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    labels = problem.labels
    if family.kind == "parametric":
        if params is None or inputs is None:
            raise ValueError("parametric run needs params and inputs")
        q = softmax_t(logits(params, inputs))
    else:
        q = problem.q_s.copy()
    run = MirrorRun([_mean_ce(labels, q)])
    for _ in range(steps):
        targets = constrained_targets(q, labels, problem.epsilon)
        proj = kl_project(targets, family, inputs, params)
        if family.kind == "parametric":
            params = proj.member
            q = softmax_t(logits(params, inputs))
        else:
            q = proj.member
        run.projection_kl.append(proj.kl_after)
        run.losses.append(_mean_ce(labels, q))
    run.q_s, run.params = q, params
    return run


def random_problem(rng: np.random.Generator, K: int, n: int, epsilon: float) -> TabularProblem:
    q = rng.dirichlet(np.ones(K), size=n)
    return TabularProblem(rng.integers(0, K, size=n), q, epsilon)


def monotonicity_suite(seeds: int = 100, steps: int = 50, seed: int = 0) -> list[dict]:
    """Random tabular problems (K <= 8, n <= 20); checks loss never increases.

    Returns one dict per problem with ``ok`` and the worst single-step increase.
    """
    from .numerics import derive_rng

    out = []
    for i in range(seeds):
        rng = derive_rng(seed, "oracle", i)
        K = int(rng.integers(2, 9))
        n = int(rng.integers(1, 21))
        eps = float(rng.choice([0.01, 0.05, 0.2]))
        run = mirror_descent_run(random_problem(rng, K, n, eps), TABULAR, steps)
        diffs = np.diff(run.losses)
        out.append({"problem": i, "K": K, "n": n, "epsilon": eps,
                    "worst_increase": float(diffs.max()) if diffs.size else 0.0,
                    "final_loss": run.losses[-1], "ok": bool(np.all(diffs <= 0.0))})
    return out
