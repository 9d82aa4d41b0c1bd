"""Analytic forward model for Gaussian-ball sources and its exact gradients.

A ball with peak pressure p0, standard deviation a0 and center at distance
d from a sensor contributes

    s(t) = (p0 / (2 d)) * [ u- G(u-) + u+ G(u+) ],   u-+ = d -+ v t,
    G(u) = exp(-u^2 / (2 a0^2)),

the closed-form pressure of a spherically symmetric Gaussian initial
condition in a lossless homogeneous medium.  The u+ term only matters in
the near field (d comparable to a0) and costs next to nothing, so it is
kept.  Signals superpose over balls.

Performance notes.  Work is evaluated on (ball chunk) x (sensor block) x
(sample window) slabs; each kernel term is only evaluated on the samples
with |u| <= cutoff_sigma * a0, located by integer window bounds.  Every
sample value derives from its absolute index on the full-rate grid, which
makes simulation at a coarsened rate bit-identical to decimating the
full-rate simulation.  Accumulation is float64 throughout.  Sensor blocks
may run on worker threads; their partial results merge in a fixed block
order, so results never depend on the worker count.
"""

from __future__ import annotations

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import PointCloud, SensorArray, SignalSet, SimulationError, TimeGrid

__all__ = [
    "ForwardContext",
    "ParamGradients",
    "simulate_signals",
    "simulate_at_rate",
    "downsample",
    "loss",
    "backward",
    "op_count",
    "reset_op_count",
    "ops_paused",
    "set_num_threads",
    "get_num_threads",
]

_CHUNK = 512          # balls per kernel slab
_SENSOR_BLOCK = 8     # sensors per slab and per worker task

_op_lock = threading.Lock()
_op_total = 0

_threads: int | None = None


def op_count() -> int:
    """Kernel-window samples evaluated since the last reset."""
    return _op_total


def reset_op_count(value: int = 0) -> None:
    global _op_total
    with _op_lock:
        _op_total = int(value)


class ops_paused:
    """Context manager: work done inside does not advance the op counter."""

    def __enter__(self):
        self._saved = op_count()
        return self

    def __exit__(self, *exc):
        reset_op_count(self._saved)
        return False


def set_num_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    _threads = int(n)


def get_num_threads() -> int:
    if _threads is not None:
        return _threads
    try:
        return max(1, int(os.environ.get("PABALL_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class ForwardContext:
    """Sensor layout plus the full-rate acquisition grid.

    cutoff_sigma truncates the kernel support; below 4 the truncation
    error would rise above the single-precision noise floor.
    """

    array: SensorArray
    grid: TimeGrid
    cutoff_sigma: float = 6.0

    def __post_init__(self) -> None:
        if self.cutoff_sigma < 4.0:
            raise ValueError(
                f"cutoff_sigma must be >= 4, got {self.cutoff_sigma}"
            )


@dataclass
class ParamGradients:
    """Loss gradients per ball: scalars for p0/a0, 3-vectors for position."""

    d_p0: np.ndarray
    d_a0: np.ndarray
    d_position: np.ndarray

    def __post_init__(self) -> None:
        n = self.d_p0.shape[0]
        if self.d_a0.shape != (n,) or self.d_position.shape != (n, 3):
            raise ValueError("gradient field shapes disagree")

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, 3)))


class _ScratchPool(threading.local):
    """Per-thread reusable buffers; every view is fully written before any
    read, so reuse cannot leak values between passes."""

    def __init__(self):
        self.bufs = {}

    def get(self, name: str, shape, dtype) -> np.ndarray:
        need = 1
        for s in shape:
            need *= int(s)
        key = (name, np.dtype(dtype).str)
        buf = self.bufs.get(key)
        if buf is None or buf.size < need:
            buf = np.empty(max(need, 1), dtype=dtype)
            self.bufs[key] = buf
        return buf[:need].reshape(shape)


_scratch = _ScratchPool()


def _block_pass(
    positions, p0, a0, sensors_blk, v, t0, dt, f, n_out, cutoff,
    real_blk, want_position,
):
    """One (all balls) x (sensor block) pass.

    Returns (rows, loss_part, g_p0, g_a0, g_pos, ops); gradient sums are
    unnormalized (the caller applies 2/N).  Everything here is elementwise
    math on rectangular (chunk, sensors, window) slabs through reused
    scratch buffers; the `inside` mask confines each kernel term to its
    truncated support and zeroes the conservative window padding exactly.
    """
    sb = sensors_blk.shape[0]
    n_balls = positions.shape[0]
    need_grad = real_blk is not None
    rows_flat = np.zeros(sb * n_out)
    offsets = (np.arange(sb, dtype=np.int64) * n_out)[None, :, None]
    vt0 = v * t0
    vdt = v * dt
    ff = float(f)
    pool = _scratch
    caches = []
    ops = 0

    inv_a0_sq = 1.0 / (a0 * a0)
    neg_half_inv_a0_sq = -0.5 * inv_a0_sq
    inv_a0_cub = inv_a0_sq / a0

    for c0 in range(0, n_balls, _CHUNK):
        sl = slice(c0, min(c0 + _CHUNK, n_balls))
        nc = sl.stop - sl.start
        diff = positions[sl][:, None, :] - sensors_blk[None, :, :]
        d = np.sqrt(np.einsum("bsx,bsx->bs", diff, diff))
        if np.any(d < 1e-12):
            raise SimulationError(
                "ball coincident with a sensor (zero source-sensor distance)"
            )
        hw = cutoff * a0[sl]            # window half-width in v*t units
        hw2 = hw * hw
        amp = p0[sl][:, None] / (2.0 * d)
        for sign in (1, -1):
            # u = d - sign * v * t; support is |u| <= hw.
            if sign > 0:
                lo_vt = d - hw[:, None]
                hi_vt = d + hw[:, None]
            else:
                # The u+ term lives around t = -d/v; for causal grids it
                # only overlaps when d is within the truncated support.
                hi_vt = hw[:, None] - d
                if np.all(hi_vt < vt0):
                    continue
                lo_vt = -(d + hw[:, None])
            k_lo = np.floor((lo_vt - vt0) / vdt).astype(np.int64) - 1
            k_hi = np.ceil((hi_vt - vt0) / vdt).astype(np.int64) + 1
            j_lo = np.maximum(-((-k_lo) // f), 0)
            j_hi = np.minimum(k_hi // f, n_out - 1)
            span = j_hi - j_lo
            if not np.any(span >= 0):
                continue
            width = max(1, min(int(span.max()) + 1, n_out))
            np.minimum(j_lo, n_out - 1, out=j_lo)
            shape = (nc, sb, width)
            slab = len(caches)
            J = pool.get("J", shape, np.int64)
            np.add(j_lo[..., None], np.arange(width, dtype=np.int64), out=J)
            inside = pool.get("inside", shape, bool)
            np.less_equal(J, j_hi[..., None], out=inside)
            np.minimum(J, n_out - 1, out=J)
            flat = pool.get(f"flat{slab}" if need_grad else "flat",
                            shape, np.int64)
            np.add(J, offsets, out=flat)
            # Absolute full-rate sample index k = J * f, evaluated so the
            # coarse and native paths see bit-identical u values.
            k = pool.get("k", shape, np.float64)
            np.copyto(k, J, casting="unsafe")
            if f != 1:
                k *= ff
            k *= vdt
            u = pool.get(f"u{slab}" if need_grad else "u", shape, np.float64)
            if sign > 0:
                np.subtract((d - vt0)[..., None], k, out=u)
            else:
                np.add((d + vt0)[..., None], k, out=u)
            u2 = pool.get("u2", shape, np.float64)
            np.multiply(u, u, out=u2)
            mask = pool.get("mask", shape, bool)
            np.less_equal(u2, hw2[:, None, None], out=mask)
            inside &= mask
            ops += int(np.count_nonzero(inside))
            G = pool.get(f"G{slab}" if need_grad else "G", shape, np.float64)
            np.multiply(u2, neg_half_inv_a0_sq[sl][:, None, None], out=G)
            np.exp(G, out=G)
            G *= inside
            wts = pool.get("wts", shape, np.float64)
            np.multiply(u, G, out=wts)
            wts *= amp[..., None]
            rows_flat += np.bincount(
                flat.ravel(), weights=wts.ravel(), minlength=sb * n_out
            )
            if need_grad:
                caches.append((sl, d, amp, flat, u, G))

    rows = rows_flat.reshape(sb, n_out)
    if not need_grad:
        return rows, 0.0, None, None, None, ops

    res = rows - real_blk
    loss_part = float(np.vdot(res, res))
    res_flat = res.ravel()
    g_p0 = np.zeros(n_balls)
    g_a0 = np.zeros(n_balls)
    g_pos = np.zeros((n_balls, 3)) if want_position else None
    for sl, d, amp, flat, u, G in caches:
        RG = pool.get("RG", G.shape, np.float64)
        np.take(res_flat, flat, out=RG)
        RG *= G
        u2 = pool.get("u2", G.shape, np.float64)
        np.multiply(u, u, out=u2)
        s_uG = np.einsum("bsw,bsw->bs", RG, u)
        s_u3G = np.einsum("bsw,bsw,bsw->bs", RG, u, u2)
        inv2d = 0.5 / d
        g_p0[sl] += (s_uG * inv2d).sum(axis=1)
        g_a0[sl] += (amp * s_u3G).sum(axis=1) * inv_a0_cub[sl]
        if want_position:
            s_G = np.einsum("bsw->bs", RG)
            s_Gu2 = np.einsum("bsw,bsw->bs", RG, u2)
            s_G1z = s_G - s_Gu2 * inv_a0_sq[sl][:, None]
            g_dist = amp * s_G1z - (amp / d) * s_uG
            diff = positions[sl][:, None, :] - sensors_blk[None, :, :]
            g_pos[sl] += np.einsum("bs,bsx->bx", g_dist / d, diff)
    return rows, loss_part, g_p0, g_a0, g_pos, ops


def _run_model(cloud, ctx, f, real=None, stage="fine"):
    """Shared driver: forward rows plus, when supervision is given, loss
    and gradients."""
    if np.any(cloud.a0 <= 0.0):
        raise ValueError("all a0 must be > 0 for forward simulation")
    grid = ctx.grid
    n_out = grid.decimated(f).n_samples if f > 1 else grid.n_samples
    need_grad = real is not None
    if need_grad and real.data.shape[1] != n_out:
        raise ValueError(
            f"supervision has {real.data.shape[1]} samples, expected {n_out} "
            f"at factor {f}"
        )
    sensors = ctx.array.positions
    n_sensors = sensors.shape[0]
    v = ctx.array.sound_speed
    want_position = stage == "fine"
    n = len(cloud)

    rows = np.zeros((n_sensors, n_out))
    if n == 0:
        if need_grad:
            l0 = float(np.sum(real.data * real.data) / real.data.size)
            return rows, l0, ParamGradients.zeros(0), 0
        return rows, None, None, 0

    def run_block(lo):
        hi = min(lo + _SENSOR_BLOCK, n_sensors)
        real_blk = real.data[lo:hi] if need_grad else None
        out = _block_pass(
            cloud.positions, cloud.p0, cloud.a0, sensors[lo:hi], v,
            grid.t0, grid.dt, f, n_out, ctx.cutoff_sigma,
            real_blk, want_position,
        )
        return (lo,) + out

    block_starts = list(range(0, n_sensors, _SENSOR_BLOCK))
    n_workers = min(get_num_threads(), len(block_starts))
    if n_workers <= 1:
        results = [run_block(lo) for lo in block_starts]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_block, block_starts))

    loss_sum = 0.0
    ops = 0
    g_p0 = np.zeros(n)
    g_a0 = np.zeros(n)
    g_pos = np.zeros((n, 3))
    # Merge in fixed block order regardless of completion order.
    for lo, b_rows, b_loss, b_p0, b_a0, b_pos, b_ops in sorted(results, key=lambda r: r[0]):
        rows[lo:lo + b_rows.shape[0]] = b_rows
        ops += b_ops
        if need_grad:
            loss_sum += b_loss
            g_p0 += b_p0
            g_a0 += b_a0
            if want_position:
                g_pos += b_pos

    global _op_total
    with _op_lock:
        _op_total += ops

    if not need_grad:
        return rows, None, None, ops
    n_total = n_sensors * n_out
    scale = 2.0 / n_total
    grads = ParamGradients(scale * g_p0, scale * g_a0, scale * g_pos)
    return rows, loss_sum / n_total, grads, ops


def simulate_signals(cloud: PointCloud, ctx: ForwardContext) -> SignalSet:
    """Full-rate sensor signals from the ball cloud (superposed kernels)."""
    rows, _, _, _ = _run_model(cloud, ctx, 1)
    return SignalSet(ctx.grid, rows)


def simulate_at_rate(cloud: PointCloud, ctx: ForwardContext, f: int) -> SignalSet:
    """Simulate directly on the f-times coarser grid.

    Pointwise kernel evaluation at the surviving absolute sample indices
    makes this equal, sample for sample, to decimating the full-rate
    simulation.
    """
    f = int(f)
    if f < 1:
        raise ValueError(f"decimation factor must be >= 1, got {f}")
    rows, _, _, _ = _run_model(cloud, ctx, f)
    return SignalSet(ctx.grid.decimated(f), rows)


def downsample(real: SignalSet, f: int) -> SignalSet:
    """Keep samples 0, f, 2f, ...; no anti-alias filtering by design, so
    decimated measurements stay comparable to coarse-rate simulation."""
    f = int(f)
    if f < 1:
        raise ValueError(f"decimation factor must be >= 1, got {f}")
    if f == 1:
        return SignalSet(real.grid, real.data.copy())
    return SignalSet(real.grid.decimated(f), real.data[:, ::f].copy())


def loss(sim: SignalSet, real: SignalSet) -> float:
    """Mean squared sample difference (normalized so learning rates are
    stable across decimation levels)."""
    if sim.data.shape != real.data.shape or sim.grid != real.grid:
        raise ValueError(
            f"signal sets disagree: {sim.data.shape}/{sim.grid} vs "
            f"{real.data.shape}/{real.grid}"
        )
    diff = sim.data - real.data
    return float(np.sum(diff * diff) / diff.size)


def _infer_factor(ctx_grid: TimeGrid, real_grid: TimeGrid) -> int:
    ratio = real_grid.dt / ctx_grid.dt
    f = int(round(ratio))
    if f < 1 or abs(ratio - f) > 1e-9 * f or real_grid.t0 != ctx_grid.t0:
        raise ValueError(
            "supervision grid is not an integer decimation of the context grid"
        )
    if ctx_grid.decimated(f).n_samples != real_grid.n_samples:
        raise ValueError(
            "supervision grid is not an integer decimation of the context grid"
        )
    return f


def backward(
    cloud: PointCloud,
    ctx: ForwardContext,
    real: SignalSet,
    stage: str = "fine",
) -> tuple:
    """Loss plus analytic gradients for every ball parameter.

    The supervision may be pre-decimated; its grid must be an integer
    decimation of ctx.grid.  In the coarse stage position gradients are
    forced to zero (positions stay fixed).
    """
    if stage not in ("coarse", "fine"):
        raise ValueError(f"stage must be 'coarse' or 'fine', got {stage!r}")
    f = _infer_factor(ctx.grid, real.grid)
    _, loss_value, grads, _ = _run_model(cloud, ctx, f, real=real, stage=stage)
    return loss_value, grads
