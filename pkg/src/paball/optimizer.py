"""Iterative point-cloud optimization.

The full loop: prune the initialization with zero-gradient filtering, run
adaptive-moment gradient descent through a coarse-to-fine schedule of
temporal decimation factors while the population adapts (destroy / split /
duplicate), then finish with a positivity-constrained refinement that
re-parameterizes a0 through softplus.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import CounterRng, OptimizationError, PointCloud, RngSeed, SignalSet
from .radiator import ForwardContext, ParamGradients, backward, downsample

__all__ = [
    "Level",
    "Schedule",
    "SCHEDULE_PRESETS",
    "DensityThresholds",
    "LearningRates",
    "OptimState",
    "FilterReport",
    "IterationTrace",
    "zero_gradient_filter",
    "create_state",
    "step",
    "density_control",
    "run_hierarchical",
    "positivity_refine",
    "softplus",
    "inv_softplus",
    "sigmoid",
]

# Convergence: stop a level when the loss has moved by less than this
# relative amount across a 50-iteration window.
_PLATEAU_REL = 1e-5
_PLATEAU_WINDOW = 50

_COARSE_DENSITY_EVERY = 100

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8

# Floor applied to a0 between density passes so the forward model stays
# evaluable; out-of-range balls are destroyed at the next density pass.
_A0_RUNTIME_FLOOR = 1e-9


# ----------------------------------------------------------------------
# Schedules and thresholds
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Level:
    f: int
    max_iters: int
    stage: str

    def __post_init__(self) -> None:
        if self.f < 1:
            raise ValueError(f"decimation factor must be >= 1, got {self.f}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.stage not in ("coarse", "fine"):
            raise ValueError(f"stage must be 'coarse' or 'fine', got {self.stage!r}")


@dataclass(frozen=True)
class Schedule:
    """Ordered decimation levels; factors never increase and the run ends
    with a fine level at the native rate."""

    levels: tuple
    duplication_period: int = 200

    def __post_init__(self) -> None:
        levels = tuple(self.levels)
        if not levels:
            raise ValueError("schedule needs at least one level")
        fs = [lv.f for lv in levels]
        if any(b > a for a, b in zip(fs, fs[1:])):
            raise ValueError(f"decimation factors must be non-increasing, got {fs}")
        if levels[-1].f != 1 or levels[-1].stage != "fine":
            raise ValueError("final level must be fine at the native rate (f=1)")
        if self.duplication_period < 1:
            raise ValueError(
                f"duplication_period must be >= 1, got {self.duplication_period}"
            )
        object.__setattr__(self, "levels", levels)


def _preset(factors, iters):
    stages = ["coarse"] + ["fine"] * (len(factors) - 1)
    return Schedule(tuple(Level(f, it, st) for f, it, st in zip(factors, iters, stages)))


# Stage factors follow the published protocols; per-level iteration budgets
# are configuration defaults.
SCHEDULE_PRESETS = {
    "sim-16-4-1": _preset((16, 4, 1), (2000, 1000, 1000)),
    "invivo-4-2-1": _preset((4, 2, 1), (1000, 500, 500)),
}


@dataclass(frozen=True)
class DensityThresholds:
    """Rules for the adaptive population control.

    destroy_p0_frac       destroy balls below this fraction of the live
                          median p0
    split_a0              balls larger than this split into two children
    duplicate_grad_quantile  fine stage copies the balls whose position-
                          gradient norm sits above this quantile
    a0_min, a0_max        survival range for a0
    """

    destroy_p0_frac: float = 0.02
    split_a0: float = 2e-3
    duplicate_grad_quantile: float = 0.90
    a0_min: float = 1e-4
    a0_max: float = 8e-3

    def __post_init__(self) -> None:
        vals = (self.destroy_p0_frac, self.split_a0,
                self.duplicate_grad_quantile, self.a0_min, self.a0_max)
        if any(v <= 0.0 for v in vals):
            raise ValueError("density thresholds must all be positive")
        if not (self.a0_min < self.split_a0 < self.a0_max):
            raise ValueError(
                f"need a0_min < split_a0 < a0_max, got "
                f"{self.a0_min} / {self.split_a0} / {self.a0_max}"
            )

    @classmethod
    def from_spacing(cls, spacing: float, **overrides) -> "DensityThresholds":
        """Defaults tied to the target voxel spacing."""
        kw = dict(
            destroy_p0_frac=0.02,
            split_a0=2.0 * spacing,
            duplicate_grad_quantile=0.90,
            a0_min=0.25 * spacing,
            a0_max=8.0 * spacing,
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass(frozen=True)
class LearningRates:
    p0: float = 1e-2
    a0: float = 4e-5
    position: float = 2e-5

    @classmethod
    def from_spacing(cls, spacing: float, p0: float = 1e-2) -> "LearningRates":
        return cls(p0=p0, a0=0.1 * spacing, position=0.05 * spacing)


# ----------------------------------------------------------------------
# Optimizer state
# ----------------------------------------------------------------------


@dataclass
class OptimState:
    """Cloud plus adaptive-moment accumulators (one pair per parameter).

    Moment arrays always track the ball count: survivors of a density pass
    carry their moments, freshly created balls start from zero.
    """

    cloud: PointCloud
    lr: LearningRates
    seed: RngSeed
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    last_grad: ParamGradients | None = None

    def __post_init__(self) -> None:
        n = len(self.cloud)
        for key, shape in (("p0", (n,)), ("a0", (n,)), ("position", (n, 3))):
            self.m.setdefault(key, np.zeros(shape))
            self.v.setdefault(key, np.zeros(shape))


def create_state(cloud: PointCloud, lr: LearningRates | None = None,
                 seed: RngSeed | int = 0) -> OptimState:
    if not isinstance(seed, RngSeed):
        seed = RngSeed(seed)
    return OptimState(cloud=cloud, lr=lr or LearningRates(), seed=seed)


def _adam_update(state: OptimState, key: str, values: np.ndarray,
                 grad: np.ndarray, lr: float, t: int) -> np.ndarray:
    m = state.m[key] = _ADAM_BETA1 * state.m[key] + (1.0 - _ADAM_BETA1) * grad
    v = state.v[key] = _ADAM_BETA2 * state.v[key] + (1.0 - _ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - _ADAM_BETA1**t)
    v_hat = v / (1.0 - _ADAM_BETA2**t)
    return values - lr * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)


# ----------------------------------------------------------------------
# Zero-gradient filtering
# ----------------------------------------------------------------------


@dataclass
class FilterReport:
    """Per-ball zero-pressure loss gradients and the retention outcome."""

    g: np.ndarray
    n_input: int
    n_retained: int

    @property
    def no_evidence(self) -> bool:
        return self.n_retained == 0


def zero_gradient_filter(
    cloud: PointCloud,
    ctx: ForwardContext,
    real: SignalSet,
    f: int,
    strict: bool = True,
) -> tuple[PointCloud, FilterReport]:
    """Keep only balls whose pressure wants to grow away from zero.

    All pressures are zeroed, so the simulated signal vanishes and the
    loss gradient for ball i reduces to -(2/N) <y_real, K_i> with K_i the
    ball's unit-pressure signal.  Balls with negative gradient (their
    pressure increasing would reduce the loss) are retained with their
    original pressure; with ``strict`` False, zero-gradient balls survive
    too.
    """
    if len(cloud) == 0:
        raise ValueError("cannot filter an empty cloud")
    if f < 1:
        raise ValueError(f"decimation factor must be >= 1, got {f}")
    real_k = downsample(real, f) if f > 1 else real
    probe = cloud.copy()
    probe.p0 = np.zeros(len(cloud))
    _, grads = backward(probe, ctx, real_k, stage="coarse")
    g = grads.d_p0
    keep = (g < 0.0) if strict else (g <= 0.0)
    retained = cloud.subset(keep)
    report = FilterReport(g=g, n_input=len(cloud), n_retained=len(retained))
    return retained, report


# ----------------------------------------------------------------------
# One optimization step
# ----------------------------------------------------------------------


def step(
    state: OptimState,
    ctx: ForwardContext,
    real_k: SignalSet,
    f: int,
    stage: str,
) -> tuple[OptimState, float]:
    """One adaptive-moment update; returns the pre-update loss.

    Coarse stage touches only p0 and a0, leaving positions bit-identical.
    """
    expected = ctx.grid.decimated(f).n_samples if f > 1 else ctx.grid.n_samples
    if real_k.data.shape[1] != expected:
        raise ValueError(
            f"supervision not decimated to factor {f}: has "
            f"{real_k.data.shape[1]} samples, expected {expected}"
        )
    loss_value, grads = backward(state.cloud, ctx, real_k, stage=stage)
    if not math.isfinite(loss_value) or not (
        np.isfinite(grads.d_p0).all()
        and np.isfinite(grads.d_a0).all()
        and np.isfinite(grads.d_position).all()
    ):
        raise OptimizationError(
            f"non-finite loss or gradient at step {state.step_count}: "
            f"loss={loss_value}, balls={len(state.cloud)}, "
            f"p0 range=({state.cloud.p0.min()}, {state.cloud.p0.max()}), "
            f"a0 range=({state.cloud.a0.min()}, {state.cloud.a0.max()})"
        )
    state.step_count += 1
    t = state.step_count
    cloud = state.cloud
    cloud.p0 = _adam_update(state, "p0", cloud.p0, grads.d_p0, state.lr.p0, t)
    new_a0 = _adam_update(state, "a0", cloud.a0, grads.d_a0, state.lr.a0, t)
    cloud.a0 = np.maximum(new_a0, _A0_RUNTIME_FLOOR)
    if stage == "fine":
        cloud.positions = _adam_update(
            state, "position", cloud.positions, grads.d_position, state.lr.position, t
        )
    state.last_grad = grads
    return state, loss_value


# ----------------------------------------------------------------------
# Adaptive density control
# ----------------------------------------------------------------------


def density_control(
    state: OptimState, thresholds: DensityThresholds, stage: str
) -> OptimState:
    """Destroy weak/out-of-range balls, split oversized ones, and (fine
    stage) duplicate the balls under the strongest position pull.

    Children and duplicates start with zero moment accumulators; survivors
    keep theirs.  Each pass bumps the cloud generation counter.
    """
    cloud = state.cloud
    n = len(cloud)
    if n == 0:
        cloud.generation += 1
        return state
    rng = CounterRng(state.seed).spawn(cloud.generation)

    # Destroy: pressure far below the live median, or size out of range.
    median_p0 = float(np.median(cloud.p0))
    weak = cloud.p0 < thresholds.destroy_p0_frac * median_p0
    out_of_range = (cloud.a0 < thresholds.a0_min) | (cloud.a0 > thresholds.a0_max)
    keep = ~(weak | out_of_range)

    surv_idx = np.flatnonzero(keep)
    positions = cloud.positions[surv_idx]
    p0 = cloud.p0[surv_idx]
    a0 = cloud.a0[surv_idx]
    a0_free = cloud.a0_free[surv_idx]
    m = {k: state.m[k][surv_idx] for k in state.m}
    v = {k: state.v[k][surv_idx] for k in state.v}
    grad_norm = None
    if state.last_grad is not None:
        grad_norm = np.linalg.norm(state.last_grad.d_position, axis=1)[surv_idx]

    # Split: each oversized ball becomes two offset children at half the
    # pressure and 1/sqrt(2) of the size.
    split = a0 > thresholds.split_a0
    split_idx = np.flatnonzero(split)
    if split_idx.size:
        u = rng.unit_vectors(split_idx.size)
        off = 0.5 * a0[split_idx, None] * u
        child_pos = np.concatenate([positions[split_idx] + off,
                                    positions[split_idx] - off])
        child_p0 = np.concatenate([0.5 * p0[split_idx]] * 2)
        child_a0 = np.concatenate([a0[split_idx] / math.sqrt(2.0)] * 2)
        child_free = np.concatenate([a0_free[split_idx]] * 2)
    keep_mask = ~split
    parents = (positions[keep_mask], p0[keep_mask], a0[keep_mask], a0_free[keep_mask])
    m = {k: m[k][keep_mask] for k in m}
    v = {k: v[k][keep_mask] for k in v}
    if grad_norm is not None:
        grad_norm = grad_norm[keep_mask]

    parts_pos = [parents[0]]
    parts_p0 = [parents[1]]
    parts_a0 = [parents[2]]
    parts_free = [parents[3]]
    if split_idx.size:
        parts_pos.append(child_pos)
        parts_p0.append(child_p0)
        parts_a0.append(child_a0)
        parts_free.append(child_free)

    # Duplicate (fine stage): copy the top (1 - q) fraction by position-
    # gradient norm, with a small seeded jitter; ties break by index.
    if stage == "fine" and grad_norm is not None and grad_norm.size:
        n_live = grad_norm.size
        k_dup = math.ceil((1.0 - thresholds.duplicate_grad_quantile) * n_live)
        k_dup = min(k_dup, n_live)
        if k_dup > 0:
            order = np.argsort(-grad_norm, kind="stable")[:k_dup]
            order = np.sort(order)
            jitter = (parents[2][order, None] / 4.0) * rng.unit_vectors(order.size)
            parts_pos.append(parents[0][order] + jitter)
            parts_p0.append(parents[1][order])
            parts_a0.append(parents[2][order])
            parts_free.append(parents[3][order])

    new_positions = np.concatenate(parts_pos)
    n_new = new_positions.shape[0]
    n_kept = parents[0].shape[0]
    state.cloud = PointCloud(
        new_positions,
        np.concatenate(parts_p0),
        np.concatenate(parts_a0),
        np.concatenate(parts_free),
        generation=cloud.generation + 1,
    )
    for key in list(m):
        fresh_shape = (n_new - n_kept,) + m[key].shape[1:]
        state.m[key] = np.concatenate([m[key], np.zeros(fresh_shape)])
        state.v[key] = np.concatenate([v[key], np.zeros(fresh_shape)])
    state.last_grad = None
    return state


# ----------------------------------------------------------------------
# Hierarchical driver
# ----------------------------------------------------------------------


@dataclass
class TraceRecord:
    step: int
    time_s: float
    loss: float
    ball_count: int
    level: int


@dataclass
class IterationTrace:
    records: list = field(default_factory=list)

    def record(self, step: int, time_s: float, loss: float,
               ball_count: int, level: int) -> None:
        if self.records and step <= self.records[-1].step:
            raise ValueError("trace steps must increase monotonically")
        self.records.append(TraceRecord(step, time_s, loss, ball_count, level))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,time_s,loss,ball_count,level\n")
            for r in self.records:
                fh.write(f"{r.step},{r.time_s:.6f},{r.loss:.12g},"
                         f"{r.ball_count},{r.level}\n")

    @classmethod
    def from_csv(cls, path) -> "IterationTrace":
        trace = cls()
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "step,time_s,loss,ball_count,level":
                raise ValueError(f"unexpected trace header: {header!r}")
            for line in fh:
                s, t, l, b, lv = line.strip().split(",")
                trace.record(int(s), float(t), float(l), int(b), int(lv))
        return trace


def run_hierarchical(
    init: PointCloud,
    ctx: ForwardContext,
    real: SignalSet,
    schedule: Schedule,
    thresholds: DensityThresholds,
    *,
    lr: LearningRates | None = None,
    seed: RngSeed | int = 0,
    callback=None,
    state: OptimState | None = None,
) -> tuple[PointCloud, IterationTrace]:
    """Run every schedule level in order on progressively finer supervision.

    Each level decimates the measurement to its factor, iterates steps with
    periodic density control (every 100 iterations in coarse levels, every
    duplication period in fine ones), and stops early on a loss plateau.
    ``callback(state, global_step, level_index, loss)`` runs after each step.
    """
    if state is None:
        state = create_state(init.copy(), lr=lr, seed=seed)
    trace = IterationTrace()
    t_start = time.perf_counter()
    global_step = 0
    for li, level in enumerate(schedule.levels):
        if len(state.cloud) == 0:
            raise OptimizationError("all points destroyed")
        real_k = downsample(real, level.f) if level.f > 1 else real
        period = (_COARSE_DENSITY_EVERY if level.stage == "coarse"
                  else schedule.duplication_period)
        losses = []
        for it in range(level.max_iters):
            state, loss_value = step(state, ctx, real_k, level.f, level.stage)
            global_step += 1
            losses.append(loss_value)
            trace.record(global_step, time.perf_counter() - t_start,
                         loss_value, len(state.cloud), li)
            if callback is not None:
                callback(state, global_step, li, loss_value)
            if (it + 1) % period == 0:
                state = density_control(state, thresholds, level.stage)
                if len(state.cloud) == 0:
                    raise OptimizationError("all points destroyed")
            if len(losses) > _PLATEAU_WINDOW:
                past = losses[-1 - _PLATEAU_WINDOW]
                if abs(past - loss_value) < _PLATEAU_REL * max(abs(past), 1e-300):
                    break
    return state.cloud, trace


# ----------------------------------------------------------------------
# Positivity-constrained refinement
# ----------------------------------------------------------------------


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) with the overflow-safe split form; always > 0."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def inv_softplus(y: np.ndarray) -> np.ndarray:
    """Preimage of softplus for y > 0, accurate over many decades."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0):
        raise ValueError("inv_softplus requires strictly positive input")
    small = y < 0.7
    out = np.empty_like(y)
    out[small] = np.log(np.expm1(y[small]))
    big = ~small
    out[big] = y[big] + np.log1p(-np.exp(-y[big]))
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pos = x >= 0.0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def positivity_refine(
    state: OptimState,
    ctx: ForwardContext,
    real: SignalSet,
    iters: int,
) -> PointCloud:
    """Final fit with a0 = softplus(a0_free), density control frozen.

    All parameters keep updating; gradients reach a0_free through the
    softplus chain rule, so the returned sizes are strictly positive.
    """
    cloud = state.cloud
    if len(cloud) and np.any(cloud.a0 <= 0.0):
        raise ValueError("positivity refinement requires a0 > 0 at entry")
    a0_free = inv_softplus(cloud.a0) if len(cloud) else np.empty(0)
    # Fresh moments: the a0 coordinate changes meaning under softplus.
    refine = create_state(cloud, lr=state.lr, seed=state.seed)
    for _ in range(int(iters)):
        cloud.a0 = softplus(a0_free)
        loss_value, grads = backward(cloud, ctx, real, stage="fine")
        if not math.isfinite(loss_value):
            raise OptimizationError(
                f"non-finite loss during refinement: {loss_value}"
            )
        refine.step_count += 1
        t = refine.step_count
        cloud.p0 = _adam_update(refine, "p0", cloud.p0, grads.d_p0,
                                refine.lr.p0, t)
        g_free = grads.d_a0 * sigmoid(a0_free)
        a0_free = _adam_update(refine, "a0", a0_free, g_free, refine.lr.a0, t)
        cloud.positions = _adam_update(
            refine, "position", cloud.positions, grads.d_position,
            refine.lr.position, t,
        )
    cloud.a0 = softplus(a0_free)
    cloud.a0_free = a0_free.copy()
    return cloud
