"""Voxelization, projections, and slices."""

import numpy as np
import pytest

from paball.model import CounterRng, PointCloud, VoxelGrid
from paball.render import RenderSpec, max_amplitude_projection, slice_plane, voxelize


def centered_spec(dims=(17, 17, 17), spacing=5e-4):
    half = (np.array(dims) - 1) / 2 * spacing
    return RenderSpec(dims=dims, spacing=spacing, origin=tuple(-half))


class TestVoxelize:
    def test_empty_cloud(self):
        grid = voxelize(PointCloud.empty(), centered_spec())
        assert not grid.values.any()

    def test_peak_and_one_sigma_values(self):
        # Ball centered exactly on a voxel center with a0 = spacing: the
        # neighbor one voxel away sits exactly one sigma out.
        spec = centered_spec(spacing=5e-4)
        cloud = PointCloud([[0.0, 0.0, 0.0]], [1.0], [5e-4])
        grid = voxelize(cloud, spec)
        c = 8
        assert grid.values[c, c, c] == 1.0
        np.testing.assert_allclose(grid.values[c + 1, c, c],
                                   np.exp(-0.5), rtol=1e-12)

    def test_colocated_balls_superpose(self):
        spec = centered_spec()
        one = voxelize(PointCloud([[0, 0, 0]], [0.7], [5e-4]), spec)
        two = voxelize(PointCloud([[0, 0, 0], [0, 0, 0]], [0.7, 0.7],
                                  [5e-4, 5e-4]), spec)
        np.testing.assert_array_equal(two.values, 2.0 * one.values)

    def test_negative_pressure_clamped(self):
        spec = centered_spec()
        grid = voxelize(PointCloud([[0, 0, 0]], [-3.0], [5e-4]), spec)
        assert not grid.values.any()

    def test_mass_consistency(self):
        # spacing = a0/2 and full interior support: the discrete sum equals
        # the Gaussian integral p0 (2 pi)^{3/2} a0^3 up to the truncated
        # box mass (< 1.2% at three sigma).
        a0 = 6e-4
        p0 = 1.3
        spec = centered_spec(dims=(33, 33, 33), spacing=a0 / 2)
        grid = voxelize(PointCloud([[0, 0, 0]], [p0], [a0]), spec)
        total = spec.spacing**3 * grid.values.sum()
        expect = p0 * (2 * np.pi) ** 1.5 * a0**3
        assert abs(total - expect) <= 0.01 * expect

    def test_translation_equivariance_exact(self):
        # Dyadic spacing and positions keep every coordinate computation
        # exact, so a one-voxel shift moves the splat bit-identically.
        spacing = 2.0**-11
        spec = RenderSpec(dims=(24, 24, 24), spacing=spacing,
                          origin=(-12 * spacing,) * 3)
        rng = CounterRng(13)
        n = 4
        pos = (np.floor(rng.uniform(-4, 4, 3 * n)).reshape(n, 3)) * spacing
        cloud = PointCloud(pos, rng.uniform(0.5, 1.5, n),
                           np.full(n, 2 * spacing))
        g0 = voxelize(cloud, spec)
        shifted = cloud.copy()
        shifted.positions = shifted.positions + np.array([spacing, 0.0, 0.0])
        g1 = voxelize(shifted, spec)
        np.testing.assert_array_equal(g1.values[1:], g0.values[:-1])

    def test_order_independence_exact(self):
        rng = CounterRng(14)
        n = 30
        pos = rng.uniform(-3e-3, 3e-3, 3 * n).reshape(n, 3)
        cloud = PointCloud(pos, rng.uniform(0.1, 2.0, n),
                           rng.uniform(3e-4, 9e-4, n))
        perm = np.argsort(rng.uniform(0, 1, n))
        shuffled = cloud.subset(perm)
        spec = centered_spec(dims=(21, 21, 21))
        a = voxelize(cloud, spec)
        b = voxelize(shuffled, spec)
        np.testing.assert_array_equal(a.values, b.values)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            RenderSpec(dims=(0, 4, 4), spacing=1e-3, origin=(0, 0, 0))
        with pytest.raises(ValueError):
            RenderSpec(dims=(4, 4, 4), spacing=0.0, origin=(0, 0, 0))
        with pytest.raises(ValueError):
            RenderSpec(dims=(4, 4, 4), spacing=1e-3, origin=(0, 0, 0),
                       support_sigma=1.0)
        with pytest.raises(ValueError):
            voxelize(PointCloud([[0, 0, 0]], [1.0], [0.0]), centered_spec())


def random_grid(seed=15, dims=(9, 11, 7)):
    vals = CounterRng(seed).uniform(0, 1, int(np.prod(dims))).reshape(dims)
    return VoxelGrid(dims, 1e-3, np.zeros(3), vals)


class TestProjectionsAndSlices:
    def test_constant_grid_projects_constant(self):
        g = VoxelGrid((4, 5, 6), 1e-3, np.zeros(3), np.full((4, 5, 6), 2.5))
        for axis in "xyz":
            np.testing.assert_array_equal(max_amplitude_projection(g, axis),
                                          2.5)

    def test_single_voxel_projects_single_pixel(self):
        vals = np.zeros((5, 6, 7))
        vals[2, 3, 4] = 1.0
        g = VoxelGrid((5, 6, 7), 1e-3, np.zeros(3), vals)
        for axis in "xyz":
            img = max_amplitude_projection(g, axis)
            assert (img > 0).sum() == 1

    def test_projection_matches_brute_force(self):
        g = random_grid()
        got = max_amplitude_projection(g, "y")
        want = np.zeros((9, 7))
        for i in range(9):
            for k in range(7):
                m = -np.inf
                for j in range(11):
                    m = max(m, g.values[i, j, k])
                want[i, k] = m
        np.testing.assert_array_equal(got, want)

    def test_slice_of_one_deep_grid(self):
        vals = CounterRng(16).uniform(0, 1, 30).reshape(5, 6, 1)
        g = VoxelGrid((5, 6, 1), 1e-3, np.zeros(3), vals)
        np.testing.assert_array_equal(slice_plane(g, "z", 0), vals[:, :, 0])

    def test_slice_isolates_plane(self):
        vals = np.zeros((5, 5, 5))
        vals[2, 1, 3] = 7.0
        g = VoxelGrid((5, 5, 5), 1e-3, np.zeros(3), vals)
        assert slice_plane(g, "x", 2)[1, 3] == 7.0
        assert not slice_plane(g, "x", 3).any()

    def test_slice_matches_brute_force(self):
        g = random_grid(seed=17)
        got = slice_plane(g, "z", 4)
        want = np.array([[g.values[i, j, 4] for j in range(11)]
                         for i in range(9)])
        np.testing.assert_array_equal(got, want)

    def test_slice_out_of_range(self):
        g = random_grid()
        with pytest.raises(ValueError):
            slice_plane(g, "z", 7)
        with pytest.raises(ValueError):
            slice_plane(g, "w", 0)
