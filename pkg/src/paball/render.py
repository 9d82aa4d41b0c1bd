"""Convert a ball cloud into a voxel grid, plus projections and slices.

Each ball splats its own source density, max(p0, 0) * exp(-r^2 / (2 a0^2)),
onto every voxel center inside an axis-aligned +-support_sigma*a0 box
around its center.  Negative pressures are clamped only here; the
optimizer is free to pass through them.  Accumulation runs in a canonical
ball order (lexicographic by position, p0, a0), so the output is exactly
independent of how the cloud happens to be ordered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PointCloud, VoxelGrid

__all__ = ["RenderSpec", "voxelize", "max_amplitude_projection", "slice_plane"]

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class RenderSpec:
    """Output grid layout; origin is the center of voxel (0, 0, 0).

    support_sigma sets the per-axis splat truncation; 3 keeps the lost
    kernel mass below 1.2%.
    """

    dims: tuple
    spacing: float
    origin: tuple
    support_sigma: float = 3.0

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be three positive counts, got {self.dims}")
        if self.spacing <= 0.0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        if self.support_sigma < 2.0:
            raise ValueError(
                f"support_sigma must be >= 2, got {self.support_sigma}"
            )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))

    def empty_grid(self) -> VoxelGrid:
        return VoxelGrid(self.dims, self.spacing, np.array(self.origin),
                         np.zeros(self.dims))


def voxelize(cloud: PointCloud, spec: RenderSpec) -> VoxelGrid:
    """Sum every ball's truncated Gaussian splat into the grid."""
    if np.any(cloud.a0 <= 0.0):
        raise ValueError("all a0 must be > 0 for voxelization")
    grid = spec.empty_grid()
    if len(cloud) == 0:
        return grid
    values = grid.values
    origin = np.array(spec.origin)
    sp = spec.spacing
    dims = spec.dims

    order = np.lexsort(
        (cloud.a0, cloud.p0, cloud.positions[:, 2], cloud.positions[:, 1],
         cloud.positions[:, 0])
    )
    for i in order:
        p0 = cloud.p0[i]
        if p0 <= 0.0:
            continue
        mu = cloud.positions[i]
        a0 = cloud.a0[i]
        half = spec.support_sigma * a0
        lo = np.ceil((mu - half - origin) / sp).astype(np.int64)
        hi = np.floor((mu + half - origin) / sp).astype(np.int64)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, np.array(dims) - 1)
        if np.any(lo > hi):
            continue
        ax = [origin[a] + np.arange(lo[a], hi[a] + 1, dtype=np.float64) * sp - mu[a]
              for a in range(3)]
        inv = -0.5 / (a0 * a0)
        r2 = (
            (ax[0] ** 2)[:, None, None]
            + (ax[1] ** 2)[None, :, None]
            + (ax[2] ** 2)[None, None, :]
        )
        values[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] += p0 * np.exp(inv * r2)
    return grid


def max_amplitude_projection(grid: VoxelGrid, axis: str) -> np.ndarray:
    """Per-pixel maximum of the volume along one axis."""
    if axis not in _AXES:
        raise ValueError(f"axis must be one of x, y, z; got {axis!r}")
    return grid.values.max(axis=_AXES[axis])


def slice_plane(grid: VoxelGrid, axis: str, index: int) -> np.ndarray:
    """Exact plane extraction at the given index along an axis."""
    if axis not in _AXES:
        raise ValueError(f"axis must be one of x, y, z; got {axis!r}")
    a = _AXES[axis]
    if not 0 <= index < grid.dims[a]:
        raise ValueError(
            f"slice index {index} out of range for axis {axis} with {grid.dims[a]} planes"
        )
    return np.take(grid.values, index, axis=a).copy()
