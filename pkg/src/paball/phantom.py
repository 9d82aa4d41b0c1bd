"""Synthetic ground truth so every pipeline run is self-contained.

Two phantom kinds: isolated balls, and vessel-like tubes built from dense
small balls along seeded polylines (one separate tube per branch).  The
dataset generator adds seeded white Gaussian noise scaled by the clean
signal RMS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import EnvelopeMesh, points_in_mesh
from .model import (
    CounterRng,
    PointCloud,
    RngSeed,
    SensorArray,
    SignalSet,
    TimeGrid,
    VoxelGrid,
)
from .radiator import ForwardContext, simulate_signals
from .render import RenderSpec, voxelize

__all__ = ["PhantomSpec", "DatasetProtocol", "PROTOCOL_PRESETS",
           "generate_phantom", "make_dataset"]


@dataclass(frozen=True)
class DatasetProtocol:
    """Named acquisition protocol (sampling and medium parameters)."""

    sampling_rate_hz: float
    n_samples: int
    sound_speed: float = 1500.0

    def time_grid(self, t0: float = 0.0) -> TimeGrid:
        return TimeGrid(t0, 1.0 / self.sampling_rate_hz, self.n_samples)


PROTOCOL_PRESETS = {
    # Simulation protocol: 40 MHz sampling, 4900 points, 1500 m/s.
    "sim-40mhz-4900": DatasetProtocol(40e6, 4900, 1500.0),
}


@dataclass(frozen=True)
class PhantomSpec:
    """Ground-truth generator parameters.

    region is either an axis-aligned box ((lo, hi) corner pair, meters) or
    a watertight EnvelopeMesh; placement stays inside it.  The rendered
    truth is voxelized at ``render``.
    """

    kind: str
    seed: RngSeed
    region: object
    render: RenderSpec
    p0_range: tuple = (0.8, 1.2)
    a0_range: tuple = (4e-4, 6e-4)
    count: int = 5              # balls kind
    branches: int = 3           # tube_tree kind
    segments_per_branch: int = 4

    def __post_init__(self) -> None:
        if self.kind not in ("balls", "tube_tree"):
            raise ValueError(f"unknown phantom kind {self.kind!r}")
        if self.p0_range[0] <= 0.0 or self.a0_range[0] <= 0.0:
            raise ValueError("amplitude and size ranges must be positive")
        if self.p0_range[0] > self.p0_range[1] or self.a0_range[0] > self.a0_range[1]:
            raise ValueError("ranges must be (lo, hi) with lo <= hi")
        if self.count < 1 or self.branches < 1 or self.segments_per_branch < 1:
            raise ValueError("counts must be >= 1")


def _region_box(region) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(region, EnvelopeMesh):
        return region.vertices.min(axis=0), region.vertices.max(axis=0)
    lo, hi = region
    lo = np.asarray(lo, dtype=np.float64).reshape(3)
    hi = np.asarray(hi, dtype=np.float64).reshape(3)
    if np.any(hi <= lo):
        raise ValueError("region box must have positive extent on every axis")
    return lo, hi


def _sample_in_region(region, rng: CounterRng, n: int) -> np.ndarray:
    lo, hi = _region_box(region)
    if isinstance(region, EnvelopeMesh):
        out = []
        got = 0
        while got < n:
            u = rng.uniform(0.0, 1.0, 3 * max(4 * n, 64)).reshape(-1, 3)
            pts = lo + (hi - lo) * u
            keep = points_in_mesh(region, pts)
            out.append(pts[keep])
            got += int(keep.sum())
        return np.concatenate(out)[:n]
    u = rng.uniform(0.0, 1.0, 3 * n).reshape(n, 3)
    return lo + (hi - lo) * u


def _balls_phantom(spec: PhantomSpec, rng: CounterRng) -> PointCloud:
    lo, hi = _region_box(spec.region)
    if np.any((hi - lo) < 4.0 * spec.a0_range[1]):
        raise ValueError(
            "region too small for the requested ball sizes "
            f"(extent {hi - lo}, a0 up to {spec.a0_range[1]})"
        )
    positions = _sample_in_region(spec.region, rng, spec.count)
    p0 = rng.uniform(*spec.p0_range, spec.count)
    a0 = rng.uniform(*spec.a0_range, spec.count)
    return PointCloud(positions, p0, a0)


def _tube_tree_phantom(spec: PhantomSpec, rng: CounterRng) -> PointCloud:
    """One curvilinear tube per branch, each confined to its own slab so
    the branches never touch."""
    lo, hi = _region_box(spec.region)
    extent = hi - lo
    slab_w = extent[0] / spec.branches
    margin = 2.0 * spec.a0_range[1]
    if slab_w <= 4.0 * margin or np.any(extent[1:] <= 4.0 * margin):
        raise ValueError(
            f"region too small for {spec.branches} separated tubes "
            f"(slab width {slab_w:g}, margin {margin:g})"
        )
    a0_mid = 0.5 * (spec.a0_range[0] + spec.a0_range[1])
    ball_spacing = 0.75 * a0_mid
    seg_len = 0.8 * extent[1] / spec.segments_per_branch

    positions = []
    for b in range(spec.branches):
        slab_lo = lo.copy()
        slab_hi = hi.copy()
        slab_lo[0] = lo[0] + b * slab_w + margin
        slab_hi[0] = lo[0] + (b + 1) * slab_w - margin
        slab_lo[1:] += margin
        slab_hi[1:] -= margin
        start = slab_lo + rng.uniform(0.2, 0.8, 3) * (slab_hi - slab_lo)
        start[1] = slab_lo[1] + 0.1 * (slab_hi[1] - slab_lo[1])
        direction = np.array([0.0, 1.0, 0.0]) + 0.3 * rng.normal(3)
        direction /= np.linalg.norm(direction)
        point = start
        for _ in range(spec.segments_per_branch):
            direction = direction + 0.5 * rng.normal(3)
            direction[1] = abs(direction[1])  # keep marching forward
            direction /= np.linalg.norm(direction)
            end = np.clip(point + seg_len * direction, slab_lo, slab_hi)
            seg = end - point
            length = float(np.linalg.norm(seg))
            n_balls = max(2, int(length / ball_spacing) + 1)
            t = np.linspace(0.0, 1.0, n_balls)[:, None]
            positions.append(point + t * seg)
            point = end
    positions = np.concatenate(positions)
    n = positions.shape[0]
    p0 = rng.uniform(*spec.p0_range, n)
    a0 = rng.uniform(*spec.a0_range, n)
    return PointCloud(positions, p0, a0)


def generate_phantom(spec: PhantomSpec) -> tuple[PointCloud, VoxelGrid]:
    """Deterministic ground-truth cloud plus its voxelized rendering."""
    rng = CounterRng(spec.seed)
    if spec.kind == "balls":
        cloud = _balls_phantom(spec, rng)
    else:
        cloud = _tube_tree_phantom(spec, rng)
    return cloud, voxelize(cloud, spec.render)


def make_dataset(
    truth: PointCloud,
    array: SensorArray,
    grid: TimeGrid,
    noise_sigma: float,
    seed: RngSeed | int = 0,
) -> SignalSet:
    """Forward-simulate the truth and add seeded white noise.

    The noise standard deviation is noise_sigma times the RMS of the clean
    signal, so noise_sigma 0 returns the exact simulation.
    """
    clean = simulate_signals(truth, ForwardContext(array, grid))
    if noise_sigma == 0.0:
        return clean
    if noise_sigma < 0.0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    rms = float(np.sqrt(np.mean(clean.data * clean.data)))
    noise = CounterRng(seed).normal(clean.data.size, sigma=noise_sigma * rms)
    return SignalSet(clean.grid, clean.data + noise.reshape(clean.data.shape))
