"""Universal back-projection reference and quantitative volume metrics.

UBP evaluates, for every voxel x,

    b(x) = (1/J) * sum_j [ 2 p_j(t) - 2 t dp_j/dt ]  at  t = |x - r_j| / v

with linear interpolation in time and a central-difference derivative.
Solid-angle weighting is simplified to uniform weights; this only affects
the baseline.  Travel times outside the recorded grid are skipped and
tallied in a coverage report.

Metrics (MSE, PSNR, SSIM) expect volumes max-normalized to [0, 1]; PSNR
then reduces to 10 log10(1/MSE).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .model import SensorArray, SignalSet, VoxelGrid
from .render import RenderSpec

__all__ = [
    "CoverageReport",
    "MetricReport",
    "ubp_reconstruct",
    "max_normalized",
    "mse",
    "psnr",
    "psnr_from_mse",
    "ssim",
    "cnr",
]


@dataclass
class CoverageReport:
    """Voxel-sensor pairs whose travel time fell outside the time grid."""

    n_total: int
    n_skipped: int

    @property
    def fraction_skipped(self) -> float:
        return self.n_skipped / self.n_total if self.n_total else 0.0


def ubp_reconstruct(
    real: SignalSet, array: SensorArray, spec: RenderSpec
) -> tuple[VoxelGrid, CoverageReport]:
    """Delay-and-sum back-projection with the temporal-derivative term."""
    grid = spec.empty_grid()
    centers = np.stack(
        np.meshgrid(
            grid.axis_centers(0), grid.axis_centers(1), grid.axis_centers(2),
            indexing="ij",
        ),
        axis=-1,
    ).reshape(-1, 3)
    tg = real.grid
    n = tg.n_samples
    v = array.sound_speed
    w = 1.0 / array.n_sensors
    deriv = np.gradient(real.data, tg.dt, axis=1)

    accum = np.zeros(centers.shape[0])
    n_skipped = 0
    for j in range(array.n_sensors):
        dist = np.linalg.norm(centers - array.positions[j], axis=1)
        tt = dist / v
        pos = (tt - tg.t0) / tg.dt
        ok = (pos >= 0.0) & (pos <= n - 1)
        n_skipped += int(np.count_nonzero(~ok))
        i0 = np.clip(np.floor(pos).astype(np.int64), 0, n - 2)
        frac = np.clip(pos - i0, 0.0, 1.0)
        p = real.data[j]
        d = deriv[j]
        p_t = p[i0] * (1.0 - frac) + p[i0 + 1] * frac
        d_t = d[i0] * (1.0 - frac) + d[i0 + 1] * frac
        accum += np.where(ok, w * (2.0 * p_t - 2.0 * tt * d_t), 0.0)

    grid.values[...] = accum.reshape(spec.dims)
    report = CoverageReport(n_total=centers.shape[0] * array.n_sensors,
                            n_skipped=n_skipped)
    return grid, report


def max_normalized(grid: VoxelGrid) -> VoxelGrid:
    """Clamp negatives and scale the peak to 1 (all-zero stays all-zero)."""
    values = np.clip(grid.values, 0.0, None)
    peak = values.max()
    if peak > 0.0:
        values = values / peak
    return VoxelGrid(grid.dims, grid.spacing, grid.origin.copy(), values)


def _check_same_dims(a: VoxelGrid, b: VoxelGrid) -> None:
    if a.dims != b.dims:
        raise ValueError(f"volume dims disagree: {a.dims} vs {b.dims}")


def mse(a: VoxelGrid, b: VoxelGrid) -> float:
    _check_same_dims(a, b)
    diff = a.values - b.values
    return float(np.mean(diff * diff))


def psnr_from_mse(m: float) -> float:
    """PSNR in dB for unit dynamic range; +inf when the error vanishes."""
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def psnr(a: VoxelGrid, b: VoxelGrid) -> float:
    return psnr_from_mse(mse(a, b))


def ssim(a: VoxelGrid, b: VoxelGrid, window: int = 7,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM with a uniform cubic window and unit dynamic range.

    Window statistics are population moments over every fully interior
    window position.
    """
    _check_same_dims(a, b)
    if any(d < window for d in a.dims):
        raise ValueError(
            f"volume dims {a.dims} smaller than SSIM window {window}"
        )
    c1 = k1 * k1
    c2 = k2 * k2
    wa = np.lib.stride_tricks.sliding_window_view(a.values, (window,) * 3)
    wb = np.lib.stride_tricks.sliding_window_view(b.values, (window,) * 3)
    ax = (-3, -2, -1)
    mu_a = wa.mean(axis=ax)
    mu_b = wb.mean(axis=ax)
    var_a = (wa * wa).mean(axis=ax) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=ax) - mu_b * mu_b
    cov = (wa * wb).mean(axis=ax) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def cnr(grid: VoxelGrid, roi_mask: np.ndarray, bg_mask: np.ndarray) -> float:
    """(mean ROI - mean background) / population std of the background."""
    roi_mask = np.asarray(roi_mask, dtype=bool)
    bg_mask = np.asarray(bg_mask, dtype=bool)
    if roi_mask.shape != grid.values.shape or bg_mask.shape != grid.values.shape:
        raise ValueError("mask shapes must match the volume")
    if np.any(roi_mask & bg_mask):
        raise ValueError("ROI and background masks overlap")
    if not roi_mask.any() or not bg_mask.any():
        raise ValueError("ROI and background masks must both be non-empty")
    roi = grid.values[roi_mask]
    bg = grid.values[bg_mask]
    sigma = float(np.std(bg))
    delta = float(np.mean(roi) - np.mean(bg))
    if sigma == 0.0:
        return math.inf if delta != 0.0 else 0.0
    return delta / sigma


@dataclass
class MetricReport:
    """Volume-comparison metrics; cnr is present only when masks were given."""

    mse: float
    psnr: float
    ssim: float
    cnr: float | None = None

    def to_text(self) -> str:
        lines = [f"mse={self.mse:.10g}", f"psnr={self.psnr:.10g}",
                 f"ssim={self.ssim:.10g}"]
        if self.cnr is not None:
            lines.append(f"cnr={self.cnr:.10g}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {"mse": self.mse, "psnr": self.psnr, "ssim": self.ssim}
        if self.cnr is not None:
            payload["cnr"] = self.cnr
        return json.dumps(payload, indent=2, allow_nan=True)
