"""Core domain types shared across the reconstruction pipeline.

Geometry is SI (meters, seconds); pressure amplitudes are a unitless
relative scale.  All stochastic operations draw from the counter-based
generator defined here so that a seed fully determines the output on
every platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ReconstructionError",
    "GeometryError",
    "SimulationError",
    "OptimizationError",
    "ConfigError",
    "FormatError",
    "RngSeed",
    "CounterRng",
    "seeded_uniform",
    "SourceBall",
    "PointCloud",
    "ValidationReport",
    "validate_cloud",
    "SensorArray",
    "TimeGrid",
    "SignalSet",
    "VoxelGrid",
]


class ReconstructionError(Exception):
    """Base class for categorized pipeline failures."""


class GeometryError(ReconstructionError):
    """Degenerate or inconsistent geometry (meshes, arrays, offsets)."""


class SimulationError(ReconstructionError):
    """Forward model cannot be evaluated (e.g. ball coincident with sensor)."""


class OptimizationError(ReconstructionError):
    """Iteration produced a non-finite state or destroyed every ball."""


class ConfigError(ReconstructionError):
    """Invalid or unknown configuration keys/values."""


class FormatError(ReconstructionError):
    """Ill-formed on-disk data; message names the offending byte offset."""


# ----------------------------------------------------------------------
# Seeded randomness
# ----------------------------------------------------------------------
#
# Counter-based stream built on the SplitMix64 output function: word i of
# the stream with seed s is
#
#     mix(s + (i + 1) * 0x9E3779B97F4A7C15)
#
# where mix is the xor-shift/multiply finalizer below.  Everything is
# wrapping 64-bit integer arithmetic, so a seed pins the stream bit-exactly
# across platforms and releases; uniform doubles take the top 53 bits.

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX_A = _U64(0xBF58476D1CE4E5B9)
_MIX_B = _U64(0x94D049BB133111EB)
_INV_2_53 = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX_A
    z = (z ^ (z >> _U64(27))) * _MIX_B
    return z ^ (z >> _U64(31))


@dataclass(frozen=True)
class RngSeed:
    """64-bit seed; equal seeds give bit-identical stochastic outputs."""

    seed: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "seed", int(self.seed) & 0xFFFFFFFFFFFFFFFF)


class CounterRng:
    """Sequential view of the counter-based stream for one seed.

    Draws advance an internal word counter; the value of word i never
    depends on how preceding words were grouped into requests.
    """

    def __init__(self, seed: int | RngSeed):
        if isinstance(seed, RngSeed):
            seed = seed.seed
        self._seed = _U64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._pos = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        return _mix64(self._seed + idx * _GOLDEN)

    def uniform(self, lo: float, hi: float, n: int) -> np.ndarray:
        """n doubles in [lo, hi); degenerate lo == hi yields lo exactly."""
        if lo > hi:
            raise ValueError(f"uniform bounds inverted: lo={lo} > hi={hi}")
        if n < 0:
            raise ValueError(f"sample count must be >= 0, got {n}")
        u = (self._raw(n) >> _U64(11)).astype(np.float64) * _INV_2_53
        return lo + (hi - lo) * u

    def normal(self, n: int, sigma: float = 1.0) -> np.ndarray:
        """Standard Box-Muller pairs on stream uniforms, scaled by sigma."""
        pairs = (n + 1) // 2
        u = self.uniform(0.0, 1.0, 2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[:pairs]))  # 1-u avoids log(0)
        th = (2.0 * math.pi) * u[pairs:]
        z = np.concatenate([r * np.cos(th), r * np.sin(th)])[:n]
        return sigma * z

    def unit_vectors(self, n: int) -> np.ndarray:
        """(n, 3) isotropic unit vectors."""
        v = self.normal(3 * n).reshape(n, 3)
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        # A zero draw has probability ~0 but would poison the normalization.
        norm[norm == 0.0] = 1.0
        return v / norm

    def spawn(self, key: int) -> "CounterRng":
        """Independent child stream keyed off this seed (does not advance)."""
        k = np.array([int(key) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        child = _mix64(self._seed ^ _mix64(k + _U64(1)))[0]
        return CounterRng(int(child))


def seeded_uniform(seed: int | RngSeed, lo: float, hi: float, n: int) -> np.ndarray:
    """Deterministic uniform samples in [lo, hi) from a fresh stream."""
    return CounterRng(seed).uniform(lo, hi, n)


# ----------------------------------------------------------------------
# Scene representation
# ----------------------------------------------------------------------


@dataclass
class SourceBall:
    """One Gaussian-ball acoustic source.

    position : (3,) meters
    p0       : peak pressure at the ball center (may dip below zero
               transiently during optimization; rendering clamps at 0)
    a0       : Gaussian standard deviation in meters, > 0 whenever the
               ball is simulated or rendered
    a0_free  : unconstrained softplus preimage of a0, NaN outside the
               positivity-refinement phase
    """

    position: np.ndarray
    p0: float
    a0: float
    a0_free: float = math.nan


class PointCloud:
    """Ordered collection of source balls, stored as parallel arrays.

    Ordering is stable under every operation that does not add or remove
    balls.  ``generation`` counts density-control passes applied so far.
    """

    __slots__ = ("positions", "p0", "a0", "a0_free", "generation")

    def __init__(self, positions, p0, a0, a0_free=None, generation: int = 0):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        p0 = np.asarray(p0, dtype=np.float64).reshape(-1)
        a0 = np.asarray(a0, dtype=np.float64).reshape(-1)
        n = positions.shape[0]
        if p0.shape[0] != n or a0.shape[0] != n:
            raise ValueError(
                f"field lengths disagree: {n} positions, {p0.shape[0]} p0, {a0.shape[0]} a0"
            )
        if a0_free is None:
            a0_free = np.full(n, math.nan)
        else:
            a0_free = np.asarray(a0_free, dtype=np.float64).reshape(-1)
            if a0_free.shape[0] != n:
                raise ValueError("a0_free length disagrees with ball count")
        self.positions = positions
        self.p0 = p0
        self.a0 = a0
        self.a0_free = a0_free
        self.generation = int(generation)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.empty((0, 3)), np.empty(0), np.empty(0))

    @classmethod
    def from_balls(cls, balls) -> "PointCloud":
        balls = list(balls)
        if not balls:
            return cls.empty()
        return cls(
            np.stack([np.asarray(b.position, dtype=np.float64) for b in balls]),
            np.array([b.p0 for b in balls], dtype=np.float64),
            np.array([b.a0 for b in balls], dtype=np.float64),
            np.array([b.a0_free for b in balls], dtype=np.float64),
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    def balls(self) -> list[SourceBall]:
        return [
            SourceBall(self.positions[i].copy(), float(self.p0[i]), float(self.a0[i]),
                       float(self.a0_free[i]))
            for i in range(len(self))
        ]

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.positions.copy(), self.p0.copy(), self.a0.copy(),
            self.a0_free.copy(), self.generation,
        )

    def subset(self, index) -> "PointCloud":
        """New cloud with the selected balls, preserving their order."""
        return PointCloud(
            self.positions[index], self.p0[index], self.a0[index],
            self.a0_free[index], self.generation,
        )

    @staticmethod
    def concatenate(clouds, generation: int = 0) -> "PointCloud":
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            out = PointCloud.empty()
            out.generation = generation
            return out
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.p0 for c in clouds]),
            np.concatenate([c.a0 for c in clouds]),
            np.concatenate([c.a0_free for c in clouds]),
            generation,
        )


@dataclass
class ValidationReport:
    n_balls: int
    violations: list = field(default_factory=list)  # (ball index, reason)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_cloud(cloud: PointCloud) -> ValidationReport:
    """Report (never raise) finiteness and a0 > 0 violations per ball."""
    report = ValidationReport(n_balls=len(cloud))
    if len(cloud) == 0:
        return report
    bad_pos = ~np.isfinite(cloud.positions).all(axis=1)
    bad_p0 = ~np.isfinite(cloud.p0)
    bad_a0 = ~np.isfinite(cloud.a0) | (cloud.a0 <= 0.0)
    for i in np.flatnonzero(bad_pos):
        report.violations.append((int(i), "non-finite position"))
    for i in np.flatnonzero(bad_p0):
        report.violations.append((int(i), "non-finite p0"))
    for i in np.flatnonzero(bad_a0):
        report.violations.append((int(i), "a0 not strictly positive"))
    return report


# ----------------------------------------------------------------------
# Acquisition geometry and data
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SensorArray:
    """Detector positions (meters) plus the medium sound speed (m/s).

    ``normals`` optionally stores outward unit normals, one per sensor.
    """

    positions: np.ndarray
    sound_speed: float = 1500.0
    normals: np.ndarray | None = None

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pos).all():
            raise ValueError("sensor positions must be finite")
        if self.sound_speed <= 0.0:
            raise ValueError(f"sound_speed must be > 0, got {self.sound_speed}")
        object.__setattr__(self, "positions", pos)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pos.shape:
                raise ValueError("normals shape must match positions")
            object.__setattr__(self, "normals", nrm)

    @property
    def n_sensors(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform sampling: sample n maps to time t0 + n * dt."""

    t0: float
    dt: float
    n_samples: int

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.n_samples < 2:
            raise ValueError(f"n_samples must be >= 2, got {self.n_samples}")

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples, dtype=np.float64) * self.dt

    def decimated(self, f: int) -> "TimeGrid":
        """Grid of every f-th sample (dt scaled, ceil(n/f) samples)."""
        f = int(f)
        if f < 1:
            raise ValueError(f"decimation factor must be >= 1, got {f}")
        n_out = -(-self.n_samples // f)
        return TimeGrid(self.t0, self.dt * f, n_out)


@dataclass
class SignalSet:
    """Sensor-major time series: data[j, n] is sensor j at grid time n."""

    grid: TimeGrid
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] != self.grid.n_samples:
            raise ValueError(
                f"data shape {data.shape} does not match grid with "
                f"{self.grid.n_samples} samples"
            )
        if not np.isfinite(data).all():
            raise ValueError("signal samples must be finite")
        self.data = data

    @property
    def n_sensors(self) -> int:
        return self.data.shape[0]


@dataclass
class VoxelGrid:
    """Scalar field on a regular grid.

    ``origin`` is the coordinate of the *center* of voxel (0, 0, 0); voxel
    (i, j, k) is centered at origin + (i, j, k) * spacing.
    """

    dims: tuple
    spacing: float
    origin: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be three positive counts, got {self.dims}")
        if self.spacing <= 0.0:
            raise ValueError(f"spacing must be > 0, got {self.spacing}")
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != dims:
            raise ValueError(f"values shape {values.shape} != dims {dims}")
        self.dims = dims
        self.origin = origin
        self.values = values

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis], dtype=np.float64) * self.spacing

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.dims, self.spacing, self.origin.copy(), self.values.copy())
