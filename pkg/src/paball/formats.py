"""Versioned on-disk formats.

Binary layouts are little-endian with a 4-byte magic and a u32 version:

  signals  "PASG" v1: u32 n_sensors, u32 n_samples, f64 t0, f64 dt,
            then f32 samples sensor-major.
  cloud    "PCBG" v1: u32 count, then per ball f32 x, y, z, p0, a0.
  volume   "PAVX" v1: u32 dx, dy, dz, f64 spacing, f64 origin x3,
            then f32 values with x varying fastest.

Readers reject unknown magics/versions and name the byte offset of any
truncation or malformation.  Sensor layouts travel as CSV with header
``x,y,z`` or ``x,y,z,nx,ny,nz``.  2D images are written as 16-bit
max-normalized PGM (P5) plus a raw float32 sidecar.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import FormatError, PointCloud, SensorArray, SignalSet, TimeGrid, VoxelGrid

__all__ = [
    "write_signals", "read_signals",
    "write_cloud", "read_cloud",
    "write_volume", "read_volume",
    "write_sensors_csv", "read_sensors_csv",
    "write_pgm", "write_float_sidecar",
]

_MAGIC_SIGNALS = b"PASG"
_MAGIC_CLOUD = b"PCBG"
_MAGIC_VOLUME = b"PAVX"
_VERSION = 1


class _Reader:
    """Byte-counting reader so errors can name their offset."""

    def __init__(self, path):
        self.path = Path(path)
        self.offset = 0
        try:
            self._data = self.path.read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self._data):
            raise FormatError(
                f"{self.path}: truncated {what} at byte {self.offset} "
                f"(wanted {n} bytes, file has {len(self._data) - self.offset} left)"
            )
        chunk = self._data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        dtype = np.dtype(dtype)
        raw = self.take(dtype.itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype)

    def expect_end(self) -> None:
        if self.offset != len(self._data):
            raise FormatError(
                f"{self.path}: {len(self._data) - self.offset} unexpected "
                f"trailing bytes at byte {self.offset}"
            )


def _check_header(r: _Reader, magic: bytes, name: str) -> None:
    got = r.take(4, f"{name} magic")
    if got != magic:
        raise FormatError(
            f"{r.path}: bad magic at byte 0: expected {magic!r}, got {got!r}"
        )
    (version,) = r.unpack("<I", f"{name} version")
    if version != _VERSION:
        raise FormatError(
            f"{r.path}: unsupported {name} version {version} at byte 4 "
            f"(reader supports {_VERSION})"
        )


# ----------------------------------------------------------------------
# Signals
# ----------------------------------------------------------------------


def write_signals(path, signals: SignalSet) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC_SIGNALS)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<IIdd", signals.n_sensors, signals.grid.n_samples,
                             signals.grid.t0, signals.grid.dt))
        fh.write(np.ascontiguousarray(signals.data, dtype="<f4").tobytes())


def read_signals(path) -> SignalSet:
    r = _Reader(path)
    _check_header(r, _MAGIC_SIGNALS, "signals")
    n_sensors, n_samples, t0, dt = r.unpack("<IIdd", "signals header")
    data = r.array("<f4", n_sensors * n_samples, "signal samples")
    r.expect_end()
    grid = TimeGrid(t0, dt, n_samples)
    return SignalSet(grid, data.astype(np.float64).reshape(n_sensors, n_samples))


# ----------------------------------------------------------------------
# Point clouds
# ----------------------------------------------------------------------


def write_cloud(path, cloud: PointCloud) -> None:
    n = len(cloud)
    rows = np.empty((n, 5), dtype="<f4")
    rows[:, :3] = cloud.positions
    rows[:, 3] = cloud.p0
    rows[:, 4] = cloud.a0
    with open(path, "wb") as fh:
        fh.write(_MAGIC_CLOUD)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", n))
        fh.write(rows.tobytes())


def read_cloud(path) -> PointCloud:
    r = _Reader(path)
    _check_header(r, _MAGIC_CLOUD, "cloud")
    (n,) = r.unpack("<I", "ball count")
    rows = r.array("<f4", n * 5, "ball records").astype(np.float64).reshape(n, 5)
    r.expect_end()
    return PointCloud(rows[:, :3], rows[:, 3], rows[:, 4])


# ----------------------------------------------------------------------
# Volumes
# ----------------------------------------------------------------------


def write_volume(path, grid: VoxelGrid) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC_VOLUME)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<IIId", *grid.dims, grid.spacing))
        fh.write(struct.pack("<ddd", *grid.origin))
        # x varies fastest on disk.
        fh.write(grid.values.astype("<f4").tobytes(order="F"))


def read_volume(path) -> VoxelGrid:
    r = _Reader(path)
    _check_header(r, _MAGIC_VOLUME, "volume")
    dx, dy, dz, spacing = r.unpack("<IIId", "volume header")
    origin = np.array(r.unpack("<ddd", "volume origin"))
    values = r.array("<f4", dx * dy * dz, "voxel values")
    r.expect_end()
    values = values.astype(np.float64).reshape((dx, dy, dz), order="F")
    return VoxelGrid((dx, dy, dz), spacing, origin, values)


# ----------------------------------------------------------------------
# Sensor CSV
# ----------------------------------------------------------------------


def write_sensors_csv(path, array: SensorArray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if array.normals is not None:
            fh.write("x,y,z,nx,ny,nz\n")
            for p, n in zip(array.positions, array.normals):
                fh.write(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g},"
                         f"{n[0]:.17g},{n[1]:.17g},{n[2]:.17g}\n")
        else:
            fh.write("x,y,z\n")
            for p in array.positions:
                fh.write(f"{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}\n")


def read_sensors_csv(path, sound_speed: float = 1500.0) -> SensorArray:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty sensor file at byte 0")
    header = lines[0].replace(" ", "")
    if header == "x,y,z":
        width = 3
    elif header == "x,y,z,nx,ny,nz":
        width = 6
    else:
        raise FormatError(
            f"{path}: bad header at byte 0: expected 'x,y,z[,nx,ny,nz]', got {lines[0]!r}"
        )
    rows = []
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        if len(parts) != width:
            raise FormatError(f"{path}: line {i} has {len(parts)} fields, expected {width}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError as exc:
            raise FormatError(f"{path}: line {i} is not numeric: {ln!r}") from exc
    data = np.array(rows, dtype=np.float64).reshape(-1, width)
    normals = data[:, 3:6] if width == 6 else None
    return SensorArray(data[:, :3], sound_speed=sound_speed, normals=normals)


# ----------------------------------------------------------------------
# Images
# ----------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """16-bit binary PGM, max-normalized (two-byte samples, MSB first)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM image must be 2D")
    peak = image.max()
    norm = image / peak if peak > 0.0 else np.zeros_like(image)
    u16 = np.clip(np.rint(norm * 65535.0), 0, 65535).astype(">u2")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(u16.tobytes())


def write_float_sidecar(path, image: np.ndarray) -> None:
    """Raw little-endian float32, row-major, same layout as the PGM."""
    image = np.asarray(image, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(image.tobytes())
