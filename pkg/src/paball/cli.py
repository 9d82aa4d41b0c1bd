"""Command-line pipeline.

Subcommands mirror the pipeline stages: phantom, simulate, filter,
reconstruct, ubp, voxelize, metrics.  Every command writes its outputs
plus a run manifest (config hash, seed, versions, timings) into the
configured output directory and exits 0 on success, nonzero with a
categorized message otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import MetricReport, cnr, max_normalized, mse, psnr, ssim, ubp_reconstruct
from .config import ReconConfig, config_hash, load_config
from .formats import (
    read_cloud,
    read_sensors_csv,
    read_signals,
    read_volume,
    write_cloud,
    write_sensors_csv,
    write_signals,
    write_volume,
)
from .geometry import InwardOffset, build_envelope, generate_array, initialize_cloud, offset_inward
from .model import (
    ConfigError,
    FormatError,
    GeometryError,
    OptimizationError,
    RngSeed,
    SimulationError,
    TimeGrid,
)
from .optimizer import (
    create_state,
    positivity_refine,
    run_hierarchical,
    zero_gradient_filter,
)
from .phantom import PhantomSpec, generate_phantom, make_dataset
from .radiator import ForwardContext, set_num_threads
from .render import voxelize
from .report import save_projection_images, save_trace_figures

_EXIT_CODES = (
    (ConfigError, 2, "config error"),
    (ValueError, 2, "argument error"),
    (FormatError, 3, "i/o error"),
    (OSError, 3, "i/o error"),
    (GeometryError, 4, "geometry error"),
    (SimulationError, 5, "simulation error"),
    (OptimizationError, 6, "optimization error"),
)


class _Run:
    """Shared context for one command invocation."""

    def __init__(self, args):
        self.cfg: ReconConfig = load_config(args.config)
        if args.preset:
            self.cfg.schedule["preset"] = args.preset
            self.cfg.schedule.pop("levels", None)
        if args.seed is not None:
            self.cfg.init["seed"] = args.seed
            self.cfg.phantom["seed"] = args.seed
        if args.deterministic:
            self.cfg.deterministic_reduction = True
        if args.threads is not None:
            set_num_threads(args.threads)
        self.threads = args.threads
        self.out_dir = Path(self.cfg.paths.get("output_dir", "."))
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.timings: dict = {}
        self.extras: dict = {}
        self._t0 = time.perf_counter()

    def time_phase(self, name: str):
        run = self

        class _Phase:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = time.perf_counter() - self.start
                return False

        return _Phase()

    def time_grid(self) -> TimeGrid:
        phys = self.cfg.physics
        try:
            return TimeGrid(
                float(phys.get("t0", 0.0)),
                1.0 / float(phys["sampling_rate_hz"]),
                int(phys["n_samples"]),
            )
        except KeyError as exc:
            raise ConfigError(f"physics section is missing key {exc}") from exc

    def sound_speed(self) -> float:
        return float(self.cfg.physics.get("sound_speed", 1500.0))

    def sensors(self):
        path = self.cfg.paths.get("sensors")
        if not path:
            raise ConfigError("paths.sensors is not set")
        return read_sensors_csv(path, sound_speed=self.sound_speed())

    def signals(self):
        path = self.cfg.paths.get("signals")
        if not path:
            raise ConfigError("paths.signals is not set")
        return read_signals(path)

    def write_manifest(self, command: str) -> None:
        manifest = {
            "command": command,
            "versions": {
                "paball": __version__,
                "numpy": np.__version__,
                "python": sys.version.split()[0],
            },
            "config_hash": config_hash(self.cfg),
            "seed": int(self.cfg.init.get("seed", 0)),
            "threads": self.threads,
            "deterministic_reduction": self.cfg.deterministic_reduction,
            "timings_s": {k: round(v, 6) for k, v in self.timings.items()},
            "total_s": round(time.perf_counter() - self._t0, 6),
            **self.extras,
        }
        path = self.out_dir / f"manifest_{command}.json"
        path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _phantom_spec(run: _Run) -> PhantomSpec:
    ph = run.cfg.phantom
    try:
        region = (np.array(ph["box_lo"], dtype=float), np.array(ph["box_hi"], dtype=float))
        return PhantomSpec(
            kind=ph.get("kind", "balls"),
            seed=RngSeed(int(ph.get("seed", 0))),
            region=region,
            render=run.cfg.resolved_render(),
            p0_range=tuple(ph.get("p0_range", (0.8, 1.2))),
            a0_range=tuple(ph.get("a0_range", (4e-4, 6e-4))),
            count=int(ph.get("count", 5)),
            branches=int(ph.get("branches", 3)),
        )
    except KeyError as exc:
        raise ConfigError(f"phantom section is missing key {exc}") from exc


def _prepare_initial_cloud(run: _Run, array, signals):
    """Envelope, inward offset, seeded initialization, optional filtering."""
    init = run.cfg.init
    try:
        n_points = int(init["n_points"])
        p0_init = float(init["p0_init"])
        a0_init = float(init["a0_init"])
    except KeyError as exc:
        raise ConfigError(f"init section is missing key {exc}") from exc
    offset = float(init.get("inward_offset", 2.0 * a0_init))
    with run.time_phase("envelope"):
        mesh = build_envelope(array)
        if offset > 0.0:
            mesh = offset_inward(mesh, InwardOffset(offset))
    with run.time_phase("initialize"):
        cloud = initialize_cloud(mesh, n_points, run.cfg.init_seed(), p0_init, a0_init)
    filt = run.cfg.filter
    if filt.get("enabled", True):
        schedule = run.cfg.resolved_schedule()
        f = int(filt.get("f") or schedule.levels[0].f)
        strict = bool(filt.get("strict", True))
        ctx = ForwardContext(array, run.time_grid())
        with run.time_phase("filter"):
            cloud, report = zero_gradient_filter(cloud, ctx, signals, f, strict=strict)
        run.extras["filter"] = {
            "n_input": report.n_input,
            "n_retained": report.n_retained,
            "no_evidence": report.no_evidence,
        }
        if report.no_evidence:
            print("filter: no evidence (no ball gradient favors growth)")
    return cloud


def cmd_phantom(args) -> int:
    run = _Run(args)
    arr_cfg = run.cfg.array
    if arr_cfg:
        with run.time_phase("array"):
            array = generate_array(
                arr_cfg.get("kind", "sphere"),
                count=int(arr_cfg.get("count", 64)),
                radius=float(arr_cfg.get("radius", 0.04)),
                seed=int(arr_cfg.get("seed", 0)),
                sound_speed=run.sound_speed(),
            )
        sensors_path = run.cfg.paths.get("sensors", run.out_dir / "sensors.csv")
        write_sensors_csv(sensors_path, array)
        run.extras["sensors_written"] = str(sensors_path)
    spec = _phantom_spec(run)
    with run.time_phase("generate"):
        truth, volume = generate_phantom(spec)
    write_cloud(run.out_dir / "truth_cloud.pcbg", truth)
    write_volume(run.out_dir / "truth_volume.pavx", volume)
    run.extras["n_truth_balls"] = len(truth)
    run.write_manifest("phantom")
    print(f"phantom: {len(truth)} balls -> {run.out_dir}")
    return 0


def cmd_simulate(args) -> int:
    run = _Run(args)
    array = run.sensors()
    cloud_path = args.cloud or (run.out_dir / "truth_cloud.pcbg")
    truth = read_cloud(cloud_path)
    noise_sigma = float(run.cfg.phantom.get("noise_sigma", 0.0))
    seed = RngSeed(int(run.cfg.phantom.get("seed", 0)))
    with run.time_phase("simulate"):
        signals = make_dataset(truth, array, run.time_grid(), noise_sigma, seed)
    out_path = run.cfg.paths.get("signals", run.out_dir / "signals.pasg")
    write_signals(out_path, signals)
    run.extras["n_sensors"] = signals.n_sensors
    run.extras["n_samples"] = signals.grid.n_samples
    run.write_manifest("simulate")
    print(f"simulate: {signals.n_sensors} sensors x {signals.grid.n_samples} samples "
          f"-> {out_path}")
    return 0


def cmd_filter(args) -> int:
    run = _Run(args)
    array = run.sensors()
    signals = run.signals()
    cloud = _prepare_initial_cloud(run, array, signals)
    write_cloud(run.out_dir / "filtered_cloud.pcbg", cloud)
    report = run.extras.get("filter", {})
    (run.out_dir / "filter_report.json").write_text(
        json.dumps(report, indent=2) + "\n", encoding="utf-8"
    )
    run.write_manifest("filter")
    print(f"filter: retained {len(cloud)} balls -> {run.out_dir}")
    return 0


def cmd_reconstruct(args) -> int:
    run = _Run(args)
    array = run.sensors()
    signals = run.signals()
    cloud = _prepare_initial_cloud(run, array, signals)
    ctx = ForwardContext(array, run.time_grid())
    schedule = run.cfg.resolved_schedule()
    thresholds = run.cfg.resolved_thresholds()
    lr = run.cfg.resolved_lr()
    with run.time_phase("optimize"):
        cloud, trace = run_hierarchical(
            cloud, ctx, signals, schedule, thresholds,
            lr=lr, seed=run.cfg.init_seed(),
        )
    refine_iters = int(run.cfg.refine.get("iters", 0))
    if refine_iters > 0:
        with run.time_phase("refine"):
            state = create_state(cloud, lr=lr, seed=run.cfg.init_seed())
            cloud = positivity_refine(state, ctx, signals, refine_iters)
    with run.time_phase("voxelize"):
        volume = voxelize(cloud, run.cfg.resolved_render())
    write_cloud(run.out_dir / "recon_cloud.pcbg", cloud)
    write_volume(run.out_dir / "recon_volume.pavx", volume)
    trace.to_csv(run.out_dir / "trace.csv")
    save_projection_images(volume, run.out_dir, "recon")
    save_trace_figures(trace, run.out_dir)
    run.extras["n_balls"] = len(cloud)
    run.extras["final_loss"] = trace.records[-1].loss if trace.records else None
    run.write_manifest("reconstruct")
    print(f"reconstruct: {len(cloud)} balls, "
          f"final loss {run.extras['final_loss']} -> {run.out_dir}")
    return 0


def cmd_ubp(args) -> int:
    run = _Run(args)
    array = run.sensors()
    signals = run.signals()
    with run.time_phase("ubp"):
        volume, coverage = ubp_reconstruct(signals, array, run.cfg.resolved_render())
    write_volume(run.out_dir / "ubp_volume.pavx", volume)
    save_projection_images(volume, run.out_dir, "ubp")
    run.extras["coverage"] = {
        "n_total": coverage.n_total,
        "n_skipped": coverage.n_skipped,
        "fraction_skipped": coverage.fraction_skipped,
    }
    run.write_manifest("ubp")
    print(f"ubp: volume -> {run.out_dir} "
          f"(skipped {coverage.fraction_skipped:.2%} of contributions)")
    return 0


def cmd_voxelize(args) -> int:
    run = _Run(args)
    cloud = read_cloud(args.cloud)
    with run.time_phase("voxelize"):
        volume = voxelize(cloud, run.cfg.resolved_render())
    out_path = run.out_dir / "volume.pavx"
    write_volume(out_path, volume)
    save_projection_images(volume, run.out_dir, "volume")
    run.write_manifest("voxelize")
    print(f"voxelize: {len(cloud)} balls -> {out_path}")
    return 0


def cmd_metrics(args) -> int:
    run = _Run(args)
    a = max_normalized(read_volume(args.recon))
    b = max_normalized(read_volume(args.truth))
    with run.time_phase("metrics"):
        report = MetricReport(mse=mse(a, b), psnr=psnr(a, b), ssim=ssim(a, b))
        if args.roi_mask and args.bg_mask:
            roi = read_volume(args.roi_mask).values > 0.5
            bg = read_volume(args.bg_mask).values > 0.5
            report.cnr = cnr(a, roi, bg)
    (run.out_dir / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    (run.out_dir / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    run.write_manifest("metrics")
    sys.stdout.write(report.to_text())
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paball",
        description="Point-cloud photoacoustic reconstruction pipeline",
    )
    parser.add_argument("--version", action="version", version=f"paball {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, extra=None):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        p.add_argument("--threads", type=int, default=None,
                       help="worker thread cap (default: PABALL_THREADS or 1)")
        p.add_argument("--deterministic", action="store_true",
                       help="force deterministic reductions")
        p.add_argument("--preset", choices=("sim-16-4-1", "invivo-4-2-1"),
                       default=None, help="override the schedule preset")
        if extra:
            extra(p)
        p.set_defaults(func=func)
        return p

    add("phantom", cmd_phantom, "generate ground truth (and optionally sensors)")
    add("simulate", cmd_simulate, "forward-simulate sensor signals",
        lambda p: p.add_argument("--cloud", default=None,
                                 help="truth cloud (default: output_dir/truth_cloud.pcbg)"))
    add("filter", cmd_filter, "initialize inside the envelope and zero-gradient filter")
    add("reconstruct", cmd_reconstruct, "full iterative reconstruction")
    add("ubp", cmd_ubp, "universal back-projection baseline")
    add("voxelize", cmd_voxelize, "render a cloud file to a voxel volume",
        lambda p: p.add_argument("--cloud", required=True, help="cloud file to render"))
    add("metrics", cmd_metrics, "compare two volume files",
        lambda p: (
            p.add_argument("--recon", required=True),
            p.add_argument("--truth", required=True),
            p.add_argument("--roi-mask", default=None),
            p.add_argument("--bg-mask", default=None),
        ))
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # categorize, report, and exit nonzero
        for exc_type, code, label in _EXIT_CODES:
            if isinstance(exc, exc_type):
                print(f"error: {label}: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
