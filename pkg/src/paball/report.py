"""Figure rendering for command outputs.

Projection images go out both as data (16-bit PGM plus a raw float32
sidecar) and as grayscale PNG figures; iteration traces render to the
loss-decay and ball-count-decay plots they exist for.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .formats import write_float_sidecar, write_pgm  # noqa: E402
from .model import VoxelGrid  # noqa: E402
from .optimizer import IterationTrace  # noqa: E402
from .render import max_amplitude_projection  # noqa: E402

__all__ = ["save_projection_images", "save_map_png", "save_trace_figures"]


def save_map_png(image: np.ndarray, path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    ax.imshow(image.T, cmap="gray", origin="lower", aspect="equal",
              interpolation="nearest")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_projection_images(grid: VoxelGrid, out_dir, stem: str) -> list[Path]:
    """Maximum-amplitude projections along every axis, as PGM + sidecar + PNG."""
    out_dir = Path(out_dir)
    written = []
    for axis in ("x", "y", "z"):
        image = max_amplitude_projection(grid, axis)
        base = out_dir / f"{stem}_map_{axis}"
        write_pgm(base.with_suffix(".pgm"), image)
        write_float_sidecar(base.with_suffix(".f32"), image)
        save_map_png(image, base.with_suffix(".png"),
                     title=f"{stem} MAP along {axis}")
        written += [base.with_suffix(".pgm"), base.with_suffix(".f32"),
                    base.with_suffix(".png")]
    return written


def save_trace_figures(trace: IterationTrace, out_dir) -> list[Path]:
    """Loss decay (log scale) and ball-count decay over iterations."""
    out_dir = Path(out_dir)
    steps = [r.step for r in trace.records]
    losses = [r.loss for r in trace.records]
    counts = [r.ball_count for r in trace.records]
    levels = [r.level for r in trace.records]

    paths = []
    for name, series, ylabel, logy in (
        ("loss_decay", losses, "loss (mean squared)", True),
        ("ball_count", counts, "ball count", False),
    ):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(steps, series, lw=1.0)
        if logy and any(v > 0 for v in series):
            ax.set_yscale("log")
        # Mark level transitions.
        for i in range(1, len(levels)):
            if levels[i] != levels[i - 1]:
                ax.axvline(steps[i], color="0.7", lw=0.8, ls="--")
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        path = out_dir / f"{name}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths
