"""Run configuration: a single JSON file with a fixed key set.

Unknown keys anywhere in the tree are errors (they are almost always
typos in an experiment sweep).  Schedule presets "sim-16-4-1" and
"invivo-4-2-1" resolve to the shipped stage protocols; explicit levels
override preset factors while keeping validation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import ConfigError, RngSeed
from .optimizer import (
    SCHEDULE_PRESETS,
    DensityThresholds,
    LearningRates,
    Level,
    Schedule,
)
from .render import RenderSpec

__all__ = ["ReconConfig", "load_config", "config_hash"]

_SECTIONS = {
    "paths": {"sensors", "signals", "output_dir"},
    "physics": {"sound_speed", "t0", "sampling_rate_hz", "n_samples"},
    "init": {"n_points", "p0_init", "a0_init", "inward_offset", "seed"},
    "filter": {"enabled", "f", "strict"},
    "schedule": {"preset", "levels", "duplication_period"},
    "thresholds": {
        "destroy_p0_frac", "split_a0", "duplicate_grad_quantile",
        "a0_min", "a0_max",
    },
    "optim": {"lr_p0", "lr_a0", "lr_position"},
    "refine": {"iters"},
    "render": {"dims", "spacing", "origin", "support_sigma"},
    "phantom": {
        "kind", "seed", "box_lo", "box_hi", "count", "branches",
        "p0_range", "a0_range", "noise_sigma",
    },
    "array": {"kind", "count", "radius", "seed"},
}
_TOP_LEVEL = set(_SECTIONS) | {"deterministic_reduction"}


def _reject_unknown(mapping: dict, allowed: set, where: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown config key {where}.{key}" if where else
                              f"unknown config key {key}")


@dataclass
class ReconConfig:
    """Resolved configuration with defaults filled in."""

    paths: dict = field(default_factory=dict)
    physics: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)
    filter: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    refine: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)
    phantom: dict = field(default_factory=dict)
    array: dict = field(default_factory=dict)
    deterministic_reduction: bool = False

    def resolved_schedule(self) -> Schedule:
        preset = self.schedule.get("preset")
        levels = self.schedule.get("levels")
        period = int(self.schedule.get("duplication_period", 200))
        if levels:
            try:
                lv = tuple(Level(int(f), int(it), str(st)) for f, it, st in levels)
                return Schedule(lv, duplication_period=period)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid schedule.levels: {exc}") from exc
        if preset:
            if preset not in SCHEDULE_PRESETS:
                raise ConfigError(
                    f"unknown schedule.preset {preset!r}; "
                    f"known presets: {sorted(SCHEDULE_PRESETS)}"
                )
            base = SCHEDULE_PRESETS[preset]
            return Schedule(base.levels, duplication_period=period)
        raise ConfigError("schedule needs either 'preset' or 'levels'")

    def resolved_thresholds(self) -> DensityThresholds:
        spacing = float(self.render["spacing"])
        try:
            return DensityThresholds.from_spacing(
                spacing, **{k: float(v) for k, v in self.thresholds.items()}
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid thresholds: {exc}") from exc

    def resolved_lr(self) -> LearningRates:
        spacing = float(self.render["spacing"])
        base = LearningRates.from_spacing(spacing)
        return LearningRates(
            p0=float(self.optim.get("lr_p0", base.p0)),
            a0=float(self.optim.get("lr_a0", base.a0)),
            position=float(self.optim.get("lr_position", base.position)),
        )

    def resolved_render(self) -> RenderSpec:
        try:
            return RenderSpec(
                dims=tuple(self.render["dims"]),
                spacing=float(self.render["spacing"]),
                origin=tuple(self.render["origin"]),
                support_sigma=float(self.render.get("support_sigma", 3.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid render section: {exc}") from exc

    def init_seed(self) -> RngSeed:
        return RngSeed(int(self.init.get("seed", 0)))

    def canonical_dict(self) -> dict:
        return {
            "paths": self.paths,
            "physics": self.physics,
            "init": self.init,
            "filter": self.filter,
            "schedule": self.schedule,
            "thresholds": self.thresholds,
            "optim": self.optim,
            "refine": self.refine,
            "render": self.render,
            "phantom": self.phantom,
            "array": self.array,
            "deterministic_reduction": self.deterministic_reduction,
        }


def load_config(path) -> ReconConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    _reject_unknown(raw, _TOP_LEVEL, "")
    cfg = ReconConfig()
    for section, allowed in _SECTIONS.items():
        value = raw.get(section, {})
        if not isinstance(value, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        _reject_unknown(value, allowed, section)
        setattr(cfg, section, value)
    det = raw.get("deterministic_reduction", False)
    if not isinstance(det, bool):
        raise ConfigError("deterministic_reduction must be true or false")
    cfg.deterministic_reduction = det
    return cfg


def config_hash(cfg: ReconConfig) -> str:
    canon = json.dumps(cfg.canonical_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()
