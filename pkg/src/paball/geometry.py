"""Envelope construction around a sensor array and point placement inside it.

The envelope is the 3D convex hull of the sensor positions, kept as a
watertight, outward-oriented triangle mesh.  Membership tests use ray
casting with a fixed, slightly skewed direction and deterministic
re-perturbation when a ray grazes an edge or vertex.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, QhullError

from .model import (
    CounterRng,
    GeometryError,
    PointCloud,
    RngSeed,
    SensorArray,
)

__all__ = [
    "EnvelopeMesh",
    "InwardOffset",
    "build_envelope",
    "offset_inward",
    "point_in_mesh",
    "points_in_mesh",
    "initialize_cloud",
    "generate_array",
    "mesh_volume",
    "mesh_inradius",
    "icosphere",
]


@dataclass
class EnvelopeMesh:
    """Closed triangulated surface: vertices (nv, 3) m, triangles (nt, 3) int.

    ``watertight`` is set by construction; consumers may re-verify with
    :func:`check_watertight`.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    watertight: bool = False

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise GeometryError("triangle index exceeds vertex count")

    def triangle_corners(self):
        """(v0, v1, v2) arrays of shape (nt, 3)."""
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]


@dataclass(frozen=True)
class InwardOffset:
    distance: float

    def __post_init__(self) -> None:
        if self.distance < 0.0:
            raise ValueError(f"offset distance must be >= 0, got {self.distance}")


def check_watertight(mesh: EnvelopeMesh) -> bool:
    """Every undirected edge must be shared by exactly two triangles."""
    t = mesh.triangles
    if len(t) == 0:
        return False
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def mesh_volume(mesh: EnvelopeMesh) -> float:
    """Signed enclosed volume; positive for outward orientation."""
    v0, v1, v2 = mesh.triangle_corners()
    return float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum() / 6.0)


def mesh_centroid(mesh: EnvelopeMesh) -> np.ndarray:
    """Volume centroid of the enclosed solid (tetrahedra against the origin)."""
    v0, v1, v2 = mesh.triangle_corners()
    vols = np.einsum("ij,ij->i", v0, np.cross(v1, v2)) / 6.0
    centers = (v0 + v1 + v2) / 4.0  # fourth tetra vertex is the origin
    total = vols.sum()
    if total == 0.0:
        raise GeometryError("mesh encloses zero volume")
    return (vols[:, None] * centers).sum(axis=0) / total


def _face_planes(mesh: EnvelopeMesh):
    """Outward unit normals n and offsets d with the face plane n.x = d."""
    v0, v1, v2 = mesh.triangle_corners()
    n = np.cross(v1 - v0, v2 - v0)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    if np.any(norm == 0.0):
        raise GeometryError("mesh contains a degenerate triangle")
    n = n / norm
    d = np.einsum("ij,ij->i", n, v0)
    return n, d


def mesh_inradius(mesh: EnvelopeMesh) -> float:
    """Chebyshev radius: the largest sphere that fits inside a convex mesh.

    Solved as a small LP over the face half-spaces.
    """
    n, d = _face_planes(mesh)
    res = linprog(
        c=[0.0, 0.0, 0.0, -1.0],
        A_ub=np.hstack([n, np.ones((len(n), 1))]),
        b_ub=d,
        bounds=[(None, None)] * 3 + [(0.0, None)],
        method="highs",
    )
    if not res.success:
        raise GeometryError(f"inradius LP failed: {res.message}")
    return float(res.x[3])


def build_envelope(array: SensorArray) -> EnvelopeMesh:
    """Convex hull of the sensor positions as a watertight triangle mesh.

    Raises GeometryError for fewer than four sensors or (near-)coplanar
    layouts, naming the defect.
    """
    pts = array.positions
    if pts.shape[0] < 4:
        raise GeometryError(
            f"envelope needs at least 4 sensors, got {pts.shape[0]}"
        )
    centered = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[2] <= 1e-12 * max(sv[0], 1e-300):
        raise GeometryError("sensor positions are coplanar; envelope is degenerate")
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:  # pragma: no cover - coplanarity caught above
        raise GeometryError(f"convex hull construction failed: {exc}") from exc

    # Compact to hull vertices only and remap triangle indices.
    used = np.unique(hull.simplices)
    remap = np.full(pts.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    vertices = pts[used].copy()
    triangles = remap[hull.simplices]

    # Qhull's simplex winding is arbitrary; flip triangles whose geometric
    # normal disagrees with the outward facet equation.
    v0, v1, v2 = vertices[triangles[:, 0]], vertices[triangles[:, 1]], vertices[triangles[:, 2]]
    geo_n = np.cross(v1 - v0, v2 - v0)
    flip = np.einsum("ij,ij->i", geo_n, hull.equations[:, :3]) < 0.0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    mesh = EnvelopeMesh(vertices, triangles, watertight=True)
    if not check_watertight(mesh):  # pragma: no cover - hull guarantees this
        raise GeometryError("hull triangulation is not watertight")
    if mesh_volume(mesh) <= 0.0:  # pragma: no cover
        raise GeometryError("hull orientation is inverted")
    return mesh


def _vertex_normals(mesh: EnvelopeMesh) -> np.ndarray:
    """Area-weighted outward vertex normals (unit length)."""
    v0, v1, v2 = mesh.triangle_corners()
    face_n = np.cross(v1 - v0, v2 - v0)  # length = 2 * area, outward
    normals = np.zeros_like(mesh.vertices)
    for col in range(3):
        np.add.at(normals, mesh.triangles[:, col], face_n)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(norm == 0.0):
        raise GeometryError("vertex with zero aggregate normal")
    return normals / norm


def offset_inward(mesh: EnvelopeMesh, off: InwardOffset) -> EnvelopeMesh:
    """Move every vertex by -distance along its area-weighted normal.

    The distance must stay below the mesh inradius, otherwise the shrunken
    surface would self-invert.
    """
    if off.distance == 0.0:
        return EnvelopeMesh(mesh.vertices.copy(), mesh.triangles.copy(), mesh.watertight)
    inr = mesh_inradius(mesh)
    if off.distance >= inr:
        raise GeometryError(
            f"inward offset {off.distance:g} m >= mesh inradius {inr:g} m; "
            "mesh would invert"
        )
    vertices = mesh.vertices - off.distance * _vertex_normals(mesh)
    return EnvelopeMesh(vertices, mesh.triangles.copy(), mesh.watertight)


# ----------------------------------------------------------------------
# Ray-cast membership
# ----------------------------------------------------------------------

# Fixed, slightly skewed ray direction; the k-th retry tilts it again so a
# recast cannot graze the same feature.
_RAY_TOL = 1e-10


def _ray_direction(k: int) -> np.ndarray:
    d = np.array([1.0, 2.5e-4 * (1.0 + 0.61803398875 * k), 6.25e-5 * (1.0 + 1.3247179572 * k)])
    return d / np.linalg.norm(d)


def points_in_mesh(mesh: EnvelopeMesh, points: np.ndarray) -> np.ndarray:
    """Strict-interior test for many points at once (crossing parity).

    Uses Moller-Trumbore against every triangle.  Hits that land within
    tolerance of an edge, vertex, or the query point itself are treated as
    degenerate and the affected rays are recast along a new deterministic
    direction.
    """
    if not mesh.watertight and not check_watertight(mesh):
        raise GeometryError("point-in-mesh requires a watertight mesh")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_pts = pts.shape[0]
    inside = np.zeros(n_pts, dtype=bool)
    pending = np.arange(n_pts)

    v0, v1, v2 = mesh.triangle_corners()
    e1 = v1 - v0
    e2 = v2 - v0
    scale = float(np.max(np.abs(mesh.vertices))) + 1.0

    for attempt in range(16):
        if pending.size == 0:
            return inside
        d = _ray_direction(attempt)
        p = pts[pending]
        crossings = np.zeros(pending.size, dtype=np.int64)
        suspect = np.zeros(pending.size, dtype=bool)
        h = np.cross(d, e2)  # (nt, 3), constant per triangle set
        a = np.einsum("ij,ij->i", e1, h)  # determinant per triangle
        near_parallel = np.abs(a) < 1e-14
        safe_a = np.where(near_parallel, 1.0, a)
        for t_idx in range(len(mesh.triangles)):
            s = p - v0[t_idx]  # (m, 3)
            u = (s @ h[t_idx]) / safe_a[t_idx]
            q = np.cross(s, e1[t_idx])
            v = (q @ d) / safe_a[t_idx]
            t = (q @ e2[t_idx]) / safe_a[t_idx]
            if near_parallel[t_idx]:
                # Ray parallel to the plane: only a hazard if the point lies
                # essentially in the plane of this triangle.
                plane_n = np.cross(e1[t_idx], e2[t_idx])
                plane_n /= np.linalg.norm(plane_n)
                dist = np.abs((p - v0[t_idx]) @ plane_n)
                suspect |= dist < _RAY_TOL * scale
                continue
            hit = (u > _RAY_TOL) & (v > _RAY_TOL) & (u + v < 1.0 - _RAY_TOL) & (
                t > _RAY_TOL * scale
            )
            graze = (
                (np.abs(u) <= _RAY_TOL)
                | (np.abs(v) <= _RAY_TOL)
                | (np.abs(1.0 - u - v) <= _RAY_TOL)
                | (np.abs(t) <= _RAY_TOL * scale)
            ) & (u > -_RAY_TOL) & (v > -_RAY_TOL) & (u + v < 1.0 + _RAY_TOL) & (
                t > -_RAY_TOL * scale
            )
            crossings += hit
            suspect |= graze
        ok = ~suspect
        inside[pending[ok]] = (crossings[ok] % 2) == 1
        pending = pending[suspect]
    raise GeometryError(
        f"ray casting failed to resolve {pending.size} degenerate queries"
    )


def point_in_mesh(mesh: EnvelopeMesh, p: np.ndarray) -> bool:
    """True iff p is strictly inside the watertight mesh."""
    return bool(points_in_mesh(mesh, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


# ----------------------------------------------------------------------
# Point-cloud initialization and synthetic arrays
# ----------------------------------------------------------------------


def initialize_cloud(
    mesh: EnvelopeMesh,
    n: int,
    seed: int | RngSeed,
    p0_init: float,
    a0_init: float,
) -> PointCloud:
    """Exactly n balls rejection-sampled uniformly inside the mesh.

    Proposals are drawn in the axis-aligned bounding box and kept when they
    pass the ray-cast interior test; the draw order is fixed, so a seed
    pins the cloud.  An acceptance rate below 1e-3 after warm-up aborts
    (the mesh is nearly degenerate).
    """
    if n < 1:
        raise ValueError(f"point count must be >= 1, got {n}")
    if a0_init <= 0.0:
        raise ValueError(f"a0_init must be > 0, got {a0_init}")
    rng = CounterRng(seed)
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    accepted = []
    n_accepted = 0
    n_proposed = 0
    batch = 4096
    while n_accepted < n:
        u = rng.uniform(0.0, 1.0, 3 * batch).reshape(batch, 3)
        proposals = lo + (hi - lo) * u
        keep = points_in_mesh(mesh, proposals)
        accepted.append(proposals[keep])
        n_accepted += int(keep.sum())
        n_proposed += batch
        if n_proposed >= 10_000 and n_accepted < 1e-3 * n_proposed:
            raise GeometryError(
                "rejection sampling acceptance rate below 1e-3; "
                "mesh interior is nearly degenerate"
            )
    positions = np.concatenate(accepted)[:n]
    return PointCloud(
        positions,
        np.full(n, float(p0_init)),
        np.full(n, float(a0_init)),
    )


def _fibonacci_sphere(count: int) -> np.ndarray:
    k = np.arange(count, dtype=np.float64)
    z = 1.0 - (2.0 * k + 1.0) / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    th = golden * k
    return np.column_stack([r * np.cos(th), r * np.sin(th), z])


def _fibonacci_hemisphere(count: int) -> np.ndarray:
    """Lower hemisphere (z <= 0), area-uniform spiral layout."""
    k = np.arange(count, dtype=np.float64)
    z = -(k + 0.5) / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    th = golden * k
    return np.column_stack([r * np.cos(th), r * np.sin(th), z])


_TETRAHEDRON = np.array(
    [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
) / np.sqrt(3.0)


def generate_array(
    kind: str,
    *,
    count: int,
    radius: float | None = None,
    mesh: EnvelopeMesh | None = None,
    seed: int | RngSeed = 0,
    sound_speed: float = 1500.0,
) -> SensorArray:
    """Synthetic sensor layouts.

    kind:
      "sphere"           Fibonacci spiral on a full sphere of ``radius``
                         (count 4 gives the regular tetrahedron).
      "hemisphere"       Fibonacci spiral on the z <= 0 half of the sphere.
      "envelope_random"  ``count`` points sampled area-uniformly on the
                         surface of ``mesh`` (seeded).
    """
    if count < 4:
        raise ValueError(f"sensor count must be >= 4, got {count}")
    if kind in ("sphere", "hemisphere"):
        if radius is None or radius <= 0.0:
            raise ValueError(f"{kind} array needs radius > 0, got {radius}")
        if kind == "sphere":
            unit = _TETRAHEDRON.copy() if count == 4 else _fibonacci_sphere(count)
        else:
            unit = _fibonacci_hemisphere(count)
        return SensorArray(radius * unit, sound_speed=sound_speed, normals=unit)
    if kind == "envelope_random":
        if mesh is None:
            raise ValueError("envelope_random array needs a mesh")
        v0, v1, v2 = mesh.triangle_corners()
        face_n = np.cross(v1 - v0, v2 - v0)
        areas = 0.5 * np.linalg.norm(face_n, axis=1)
        cdf = np.cumsum(areas)
        cdf /= cdf[-1]
        rng = CounterRng(seed)
        u = rng.uniform(0.0, 1.0, 3 * count).reshape(count, 3)
        tri = np.searchsorted(cdf, u[:, 0], side="right").clip(0, len(areas) - 1)
        s = np.sqrt(u[:, 1])[:, None]
        t = u[:, 2][:, None]
        pts = (1.0 - s) * v0[tri] + s * (1.0 - t) * v1[tri] + s * t * v2[tri]
        normals = face_n[tri] / np.linalg.norm(face_n[tri], axis=1, keepdims=True)
        return SensorArray(pts, sound_speed=sound_speed, normals=normals)
    raise ValueError(f"unknown array kind {kind!r}")


def icosphere(radius: float = 1.0, subdivisions: int = 1) -> EnvelopeMesh:
    """Geodesic sphere from a subdivided icosahedron, outward oriented.

    With ``subdivisions`` <= 1 every vertex sits on a symmetry axis of the
    icosahedron, so area-weighted vertex normals are exactly radial.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts_list = list(verts)
        midpoint_cache: dict = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint_cache:
                m = verts_list[i] + verts_list[j]
                m = m / np.linalg.norm(m)
                midpoint_cache[key] = len(verts_list)
                verts_list.append(m)
            return midpoint_cache[key]

        new_faces = []
        for i0, i1, i2 in faces:
            a, b, c = midpoint(i0, i1), midpoint(i1, i2), midpoint(i2, i0)
            new_faces += [[i0, a, c], [i1, b, a], [i2, c, b], [a, b, c]]
        verts = np.array(verts_list)
        faces = np.array(new_faces, dtype=np.int64)
    mesh = EnvelopeMesh(radius * verts, faces, watertight=True)
    if mesh_volume(mesh) < 0.0:  # pragma: no cover - winding above is outward
        mesh.triangles = mesh.triangles[:, [0, 2, 1]]
    return mesh
