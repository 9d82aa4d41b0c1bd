"""Shared fixtures: the desk-scale recovery pipeline used by several suites.

The pipeline instance follows the acceptance configuration: five Gaussian
sources inside a 64-sensor sphere of radius 40 mm, sampled at 20 MHz for
1024 points, schedule 8x coarse -> 2x fine -> 1x fine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from paball.baseline import max_normalized, psnr, ubp_reconstruct
from paball.geometry import InwardOffset, build_envelope, generate_array, initialize_cloud, offset_inward
from paball.model import CounterRng, PointCloud, RngSeed, TimeGrid
from paball.optimizer import (
    DensityThresholds,
    LearningRates,
    Level,
    Schedule,
    create_state,
    positivity_refine,
    run_hierarchical,
    zero_gradient_filter,
)
from paball.radiator import ForwardContext, loss, simulate_signals
from paball.render import RenderSpec, voxelize

DESK_SEED = 11
DESK_SPACING = 4e-4  # 0.4 mm target voxel spacing


def desk_instance(seed: int):
    """Five-ball phantom, 64-sensor sphere r=40 mm, 20 MHz x 1024 samples."""
    array = generate_array("sphere", count=64, radius=0.040)
    grid = TimeGrid(0.0, 5e-8, 1024)
    ctx = ForwardContext(array, grid)
    rng = CounterRng(seed)
    positions = rng.uniform(-8e-3, 8e-3, 15).reshape(5, 3)
    truth = PointCloud(positions, rng.uniform(0.8, 1.2, 5),
                       rng.uniform(5e-4, 7e-4, 5))
    real = simulate_signals(truth, ctx)
    return ctx, truth, real


def desk_initial_cloud(ctx, real, seed: int, n_points: int = 1500):
    """Envelope -> deep inward offset -> seeded init -> zero-gradient filter."""
    mesh = build_envelope(ctx.array)
    mesh = offset_inward(mesh, InwardOffset(0.025))
    init = initialize_cloud(mesh, n_points, RngSeed(seed), p0_init=0.05,
                            a0_init=7e-4)
    filtered, report = zero_gradient_filter(init, ctx, real, f=8)
    return mesh, init, filtered, report


def desk_schedule() -> Schedule:
    return Schedule(
        (Level(8, 400, "coarse"), Level(2, 250, "fine"), Level(1, 250, "fine")),
        duplication_period=100,
    )


def desk_render_spec() -> RenderSpec:
    return RenderSpec(dims=(51, 51, 51), spacing=DESK_SPACING,
                      origin=(-0.01, -0.01, -0.01))


@dataclass
class DeskPipelineResult:
    ctx: object
    truth: PointCloud
    real: object
    filtered: PointCloud
    filter_report: object
    final: PointCloud
    trace: object
    loss_initial: float
    loss_final: float
    truth_volume: object
    recon_volume: object
    ubp_volume: object
    psnr_recon: float
    psnr_ubp: float


@pytest.fixture(scope="session")
def desk_pipeline() -> DeskPipelineResult:
    """One full recovery run shared by the acceptance and trend tests."""
    ctx, truth, real = desk_instance(DESK_SEED)
    _, _, filtered, report = desk_initial_cloud(ctx, real, seed=3)
    thresholds = DensityThresholds.from_spacing(DESK_SPACING)
    lr = LearningRates.from_spacing(DESK_SPACING)
    loss_initial = loss(simulate_signals(filtered, ctx), real)
    final, trace = run_hierarchical(
        filtered.copy(), ctx, real, desk_schedule(), thresholds,
        lr=lr, seed=RngSeed(3),
    )
    state = create_state(final, lr=lr, seed=RngSeed(3))
    final = positivity_refine(state, ctx, real, 50)
    loss_final = loss(simulate_signals(final, ctx), real)

    spec = desk_render_spec()
    truth_volume = voxelize(truth, spec)
    recon_volume = voxelize(final, spec)
    ubp_volume, _ = ubp_reconstruct(real, ctx.array, spec)
    tn = max_normalized(truth_volume)
    return DeskPipelineResult(
        ctx=ctx, truth=truth, real=real, filtered=filtered,
        filter_report=report, final=final, trace=trace,
        loss_initial=loss_initial, loss_final=loss_final,
        truth_volume=truth_volume, recon_volume=recon_volume,
        ubp_volume=ubp_volume,
        psnr_recon=psnr(max_normalized(recon_volume), tn),
        psnr_ubp=psnr(max_normalized(ubp_volume), tn),
    )
