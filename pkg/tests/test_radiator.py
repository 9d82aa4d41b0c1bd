"""Forward model: kernel shape, gradients, decimation, and invariants."""

import numpy as np
import pytest

import paball.radiator as radiator
from paball.geometry import generate_array
from paball.model import (
    CounterRng,
    PointCloud,
    SensorArray,
    SignalSet,
    SimulationError,
    TimeGrid,
)
from paball.radiator import (
    ForwardContext,
    backward,
    downsample,
    loss,
    op_count,
    ops_paused,
    reset_op_count,
    simulate_at_rate,
    simulate_signals,
)


def single_ball_ctx():
    cloud = PointCloud([[0.0, 0.0, 0.0]], [1.0], [0.5e-3])
    array = SensorArray(positions=[[0.03, 0.0, 0.0]], sound_speed=1500.0)
    ctx = ForwardContext(array, TimeGrid(0.0, 1e-8, 4096))
    return cloud, ctx


def seeded_instance(seed=123, n_balls=10, n_sensors=16, n_samples=256):
    """Mismatched candidate/truth clouds inside a small sphere array."""
    rng = CounterRng(seed)
    array = generate_array("sphere", count=n_sensors, radius=0.008)
    ctx = ForwardContext(array, TimeGrid(0.0, 5e-8, n_samples))
    cloud = PointCloud(
        rng.uniform(-3e-3, 3e-3, 3 * n_balls).reshape(n_balls, 3),
        rng.uniform(0.5, 1.5, n_balls),
        rng.uniform(0.4e-3, 0.8e-3, n_balls),
    )
    truth = PointCloud(
        rng.uniform(-3e-3, 3e-3, 3 * n_balls).reshape(n_balls, 3),
        rng.uniform(0.5, 1.5, n_balls),
        rng.uniform(0.4e-3, 0.8e-3, n_balls),
    )
    return ctx, cloud, truth, simulate_signals(truth, ctx)


class TestSimulate:
    def test_empty_cloud_all_zero(self):
        _, ctx = single_ball_ctx()
        out = simulate_signals(PointCloud.empty(), ctx)
        assert not out.data.any()
        assert out.data.shape == (1, 4096)

    def test_n_shape_zero_crossing_and_symmetry(self):
        # d = 30 mm, v = 1500 m/s: crossing at t = 20 us = sample 2000.
        cloud, ctx = single_ball_ctx()
        s = simulate_signals(cloud, ctx).data[0]
        assert abs(s[2000]) < 1e-10
        i_hi, i_lo = np.argmax(s), np.argmin(s)
        assert i_hi < 2000 < i_lo
        assert abs((i_hi + i_lo) / 2 - 2000) <= 1.0

    def test_matches_closed_form(self):
        cloud, ctx = single_ball_ctx()
        s = simulate_signals(cloud, ctx).data[0]
        t = ctx.grid.times()
        d, v, a0 = 0.03, 1500.0, 0.5e-3
        um, up = d - v * t, d + v * t
        cut = ctx.cutoff_sigma * a0
        ref = (1.0 / (2 * d)) * (
            um * np.exp(-um**2 / (2 * a0**2)) * (np.abs(um) <= cut)
            + up * np.exp(-up**2 / (2 * a0**2)) * (np.abs(up) <= cut)
        )
        np.testing.assert_allclose(s, ref, rtol=0, atol=1e-13 * np.abs(ref).max())

    def test_p0_linearity_exact(self):
        cloud, ctx = single_ball_ctx()
        s1 = simulate_signals(cloud, ctx).data
        doubled = cloud.copy()
        doubled.p0 *= 2.0
        np.testing.assert_array_equal(simulate_signals(doubled, ctx).data,
                                      2.0 * s1)

    def test_superposition(self):
        ctx, cloud, truth, _ = seeded_instance()
        both = PointCloud.concatenate([cloud, truth])
        s_both = simulate_signals(both, ctx).data
        s_sum = simulate_signals(cloud, ctx).data + simulate_signals(truth, ctx).data
        scale = np.abs(s_both).max()
        np.testing.assert_allclose(s_both, s_sum, rtol=0, atol=1e-9 * scale)

    def test_radial_shift_moves_arrival(self):
        cloud, ctx = single_ball_ctx()
        s0 = simulate_signals(cloud, ctx).data[0]
        delta = 3e-3  # move 3 mm away from the sensor at +x
        moved = cloud.copy()
        moved.positions[0, 0] -= delta
        s1 = simulate_signals(moved, ctx).data[0]
        xc = np.correlate(s1, s0, mode="full")
        shift = np.argmax(xc) - (len(s0) - 1)
        expected = delta / (ctx.array.sound_speed * ctx.grid.dt)
        assert abs(shift - expected) <= 1.0

    def test_truncation_insensitivity(self):
        # Doubling the support cutoff only adds tail samples below the
        # analytic bound 6 e^{-18} / e^{-1/2} of the peak; energy-wise the
        # change is far below the single-precision floor.
        ctx, cloud, _, _ = seeded_instance()
        wide = ForwardContext(ctx.array, ctx.grid, cutoff_sigma=12.0)
        s6 = simulate_signals(cloud, ctx).data
        s12 = simulate_signals(cloud, wide).data
        diff = np.abs(s12 - s6)
        bound = 6.0 * np.exp(-18.0) / np.exp(-0.5)  # ~1.51e-7 of peak
        assert diff.max() <= bound * np.abs(s12).max()
        assert np.linalg.norm(diff) <= 1e-7 * np.linalg.norm(s12)

    def test_ball_on_sensor_rejected(self):
        array = SensorArray(positions=[[0.0, 0.0, 0.0]])
        ctx = ForwardContext(array, TimeGrid(0.0, 1e-8, 16))
        with pytest.raises(SimulationError):
            simulate_signals(PointCloud([[0.0, 0.0, 0.0]], [1.0], [1e-3]), ctx)

    def test_nonpositive_a0_rejected(self):
        _, ctx = single_ball_ctx()
        with pytest.raises(ValueError):
            simulate_signals(PointCloud([[0, 0, 0]], [1.0], [0.0]), ctx)

    def test_cutoff_sigma_floor(self):
        _, ctx = single_ball_ctx()
        with pytest.raises(ValueError):
            ForwardContext(ctx.array, ctx.grid, cutoff_sigma=3.0)


class TestLoss:
    def test_perfect_match(self):
        _, _, _, real = seeded_instance()
        assert loss(real, real) == 0.0

    def test_constant_offset(self):
        _, _, _, real = seeded_instance()
        shifted = SignalSet(real.grid, real.data + 0.25)
        assert abs(loss(shifted, real) - 0.0625) < 1e-15

    def test_matches_two_pass_oracle(self):
        rng = CounterRng(55)
        grid = TimeGrid(0.0, 1e-8, 300)
        a = SignalSet(grid, rng.uniform(-1, 1, 4 * 300).reshape(4, 300))
        b = SignalSet(grid, rng.uniform(-1, 1, 4 * 300).reshape(4, 300))
        got = loss(a, b)
        acc = 0.0
        for j in range(4):
            for t in range(300):
                acc += (a.data[j, t] - b.data[j, t]) ** 2
        want = acc / (4 * 300)
        assert abs(got - want) <= 1e-12 * want

    def test_shape_mismatch(self):
        _, _, _, real = seeded_instance()
        with pytest.raises(ValueError):
            loss(real, downsample(real, 2))


class TestBackward:
    def test_perfect_fit_zero_gradients(self):
        ctx, _, truth, real = seeded_instance()
        L, g = backward(truth, ctx, real, stage="fine")
        assert L == 0.0
        assert not g.d_p0.any() and not g.d_a0.any() and not g.d_position.any()

    def test_gradients_match_finite_differences(self):
        ctx, cloud, _, real = seeded_instance()
        _, g = backward(cloud, ctx, real, stage="fine")

        def loss_at(cl):
            return loss(simulate_signals(cl, ctx), real)

        def central(setter, h):
            cp, cm = cloud.copy(), cloud.copy()
            setter(cp, +h)
            setter(cm, -h)
            return (loss_at(cp) - loss_at(cm)) / (2 * h)

        worst = 0.0
        for i in range(len(cloud)):
            fd = central(lambda c, d, i=i: c.p0.__setitem__(i, c.p0[i] + d), 1e-6)
            worst = max(worst, abs(fd - g.d_p0[i]) / abs(fd))
            fd = central(lambda c, d, i=i: c.a0.__setitem__(i, c.a0[i] + d), 1e-9)
            worst = max(worst, abs(fd - g.d_a0[i]) / abs(fd))
            for ax in range(3):
                def bump(c, d, i=i, ax=ax):
                    c.positions[i, ax] += d
                fd = central(bump, 1e-9)
                worst = max(worst, abs(fd - g.d_position[i, ax]) / abs(fd))
        assert worst <= 1e-5

    def test_first_order_expansion_slope(self):
        ctx, cloud, _, real = seeded_instance()
        L0, g = backward(cloud, ctx, real, stage="fine")
        hs = np.array([1e-7, 3e-8, 1e-8, 3e-9, 1e-9])
        errs = []
        for h in hs:
            cp = cloud.copy()
            cp.positions[3, 0] += h
            L1 = loss(simulate_signals(cp, ctx), real)
            errs.append(abs(L1 - L0 - g.d_position[3, 0] * h))
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert slope >= 1.9

    def test_coarse_stage_position_gradient_zero(self):
        ctx, cloud, _, real = seeded_instance()
        _, g = backward(cloud, ctx, real, stage="coarse")
        assert not g.d_position.any()
        _, g_fine = backward(cloud, ctx, real, stage="fine")
        assert g_fine.d_position.any()

    def test_decimated_supervision(self):
        ctx, cloud, _, real = seeded_instance()
        L4, _ = backward(cloud, ctx, downsample(real, 4), stage="fine")
        assert np.isfinite(L4) and L4 > 0

    def test_mismatched_grid_rejected(self):
        ctx, cloud, _, real = seeded_instance()
        odd = SignalSet(TimeGrid(1e-7, real.grid.dt, real.grid.n_samples),
                        real.data)
        with pytest.raises(ValueError):
            backward(cloud, ctx, odd)


class TestDownsample:
    def test_identity(self):
        _, _, _, real = seeded_instance()
        out = downsample(real, 1)
        np.testing.assert_array_equal(out.data, real.data)
        assert out.grid == real.grid

    def test_protocol_decimation_count(self):
        # 4900 samples at 4x decimation keep ceil(4900/4) = 1225.
        grid = TimeGrid(0.0, 1.0 / 40e6, 4900)
        sig = SignalSet(grid, np.zeros((2, 4900)))
        assert downsample(sig, 4).grid.n_samples == 1225

    def test_composition(self):
        _, _, _, real = seeded_instance()
        once = downsample(real, 16)
        again = downsample(once, 1)
        np.testing.assert_array_equal(once.data, again.data)

    def test_invalid_factor(self):
        _, _, _, real = seeded_instance()
        with pytest.raises(ValueError):
            downsample(real, 0)


class TestSimulateAtRate:
    def test_f1_equals_full(self):
        ctx, cloud, _, _ = seeded_instance()
        a = simulate_at_rate(cloud, ctx, 1)
        b = simulate_signals(cloud, ctx)
        np.testing.assert_array_equal(a.data, b.data)

    @pytest.mark.parametrize("f", [2, 4, 16])
    def test_equals_decimated_full_rate_exactly(self, f):
        ctx, cloud, _, _ = seeded_instance()
        coarse = simulate_at_rate(cloud, ctx, f)
        dec = downsample(simulate_signals(cloud, ctx), f)
        np.testing.assert_array_equal(coarse.data, dec.data)
        assert coarse.grid == dec.grid

    def test_cost_scales_inversely_with_factor(self):
        ctx, cloud, _, _ = seeded_instance(n_samples=1024)
        costs = {}
        for f in (1, 4):
            reset_op_count()
            simulate_at_rate(cloud, ctx, f)
            costs[f] = op_count()
        ratio = costs[1] / costs[4]
        assert 3.0 < ratio < 5.0

    def test_ops_paused_restores_counter(self):
        ctx, cloud, _, _ = seeded_instance()
        reset_op_count(1234)
        with ops_paused():
            simulate_signals(cloud, ctx)
        assert op_count() == 1234


class TestParallelDeterminism:
    def test_thread_count_invariance(self):
        ctx, cloud, _, real = seeded_instance(n_sensors=32)
        saved = radiator.get_num_threads()
        try:
            radiator.set_num_threads(1)
            s1 = simulate_signals(cloud, ctx).data
            L1, g1 = backward(cloud, ctx, real, stage="fine")
            radiator.set_num_threads(4)
            s4 = simulate_signals(cloud, ctx).data
            L4, g4 = backward(cloud, ctx, real, stage="fine")
        finally:
            radiator.set_num_threads(saved)
        np.testing.assert_array_equal(s1, s4)
        assert L1 == L4
        np.testing.assert_array_equal(g1.d_p0, g4.d_p0)
        np.testing.assert_array_equal(g1.d_a0, g4.d_a0)
        np.testing.assert_array_equal(g1.d_position, g4.d_position)
