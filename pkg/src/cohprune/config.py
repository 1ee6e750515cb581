"""Experiment configuration: one JSON document, every field defaulted."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .synthetic import STRUCTURES


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class LatticeSpec:
    height: int = 64
    width: int = 64
    dim: int = 16
    seed: int = 0
    structure: str = "grid-coherent"
    sigma: float = 0.1
    grid_width: int = 16
    count: int = 1


@dataclass
class StackSpecConfig:
    blocks: int = 4
    heads: int = 2
    weight_seed: int = 0
    weight_scale: float = 1.0
    grid_sizes: list[int] = field(default_factory=lambda: [16, 9])
    sub_width: int = 3
    stride: int = 2


@dataclass
class ScheduleSpec:
    delta_k: int = 64
    interval: int = 15
    cap: float = 0.6
    decay: float = 0.25
    total_steps: int = 20
    late_steps: int = 5
    # average skip ratio over blocks at which the schedule stops; required by `schedule`
    target_budget: float | None = None
    iterations: int | None = None
    block_redundancy: list[float] | None = None


@dataclass
class ExperimentConfig:
    lattice: LatticeSpec = field(default_factory=LatticeSpec)
    stack: StackSpecConfig = field(default_factory=StackSpecConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    output_dir: str = "cohprune-out"

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "ExperimentConfig":
        lat, st, sc = self.lattice, self.stack, self.schedule
        for name in ("height", "width", "dim", "grid_width", "count"):
            _positive(f"lattice.{name}", getattr(lat, name))
        if lat.structure not in STRUCTURES:
            raise ConfigError("lattice.structure", f"must be one of {STRUCTURES}, got {lat.structure!r}")
        if lat.sigma < 0:
            raise ConfigError("lattice.sigma", f"must be >= 0, got {lat.sigma}")
        if lat.grid_width > min(lat.height, lat.width):
            raise ConfigError("lattice.grid_width", "exceeds lattice size")
        for name in ("blocks", "heads", "sub_width", "stride"):
            _positive(f"stack.{name}", getattr(st, name))
        if lat.dim % st.heads:
            raise ConfigError("stack.heads", f"{st.heads} does not divide lattice.dim={lat.dim}")
        if not st.grid_sizes:
            raise ConfigError("stack.grid_sizes", "must list at least one grid width")
        for g in st.grid_sizes:
            if not 1 <= g <= min(lat.height, lat.width):
                raise ConfigError("stack.grid_sizes", f"grid width {g} outside [1, min(H, W)]")
            if st.sub_width > g:
                raise ConfigError("stack.sub_width", f"{st.sub_width} exceeds grid width {g}")
        if st.stride > st.sub_width:
            raise ConfigError("stack.stride", f"{st.stride} exceeds sub_width={st.sub_width}")
        _positive("schedule.delta_k", sc.delta_k)
        _positive("schedule.interval", sc.interval)
        _positive("schedule.total_steps", sc.total_steps)
        if not 0 <= sc.cap <= 1:
            raise ConfigError("schedule.cap", f"must lie in [0, 1], got {sc.cap}")
        if not 0 < sc.decay < 1:
            raise ConfigError("schedule.decay", f"must lie in (0, 1), got {sc.decay}")
        if not 0 <= sc.late_steps <= sc.total_steps:
            raise ConfigError("schedule.late_steps", f"must lie in [0, total_steps={sc.total_steps}]")
        if sc.target_budget is not None and not 0 < sc.target_budget <= 1:
            raise ConfigError("schedule.target_budget", f"must lie in (0, 1], got {sc.target_budget}")
        if sc.iterations is not None:
            _positive("schedule.iterations", sc.iterations)
        if sc.block_redundancy is not None:
            if len(sc.block_redundancy) != st.blocks:
                raise ConfigError("schedule.block_redundancy", f"needs {st.blocks} values")
            if any(not 0 < r <= 1 for r in sc.block_redundancy):
                raise ConfigError("schedule.block_redundancy", "values must lie in (0, 1]")
        return self


def _positive(name: str, value) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(name, f"must be a positive integer, got {value!r}")


_SECTIONS = {"lattice": LatticeSpec, "stack": StackSpecConfig, "schedule": ScheduleSpec}


def from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = ExperimentConfig()
    for key, value in obj.items():
        if key == "output_dir":
            cfg.output_dir = str(value)
            continue
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown config section")
        if not isinstance(value, dict):
            raise ConfigError(key, "section must be a JSON object")
        section = getattr(cfg, key)
        known = {f.name for f in fields(_SECTIONS[key])}
        for k, v in value.items():
            if k not in known:
                raise ConfigError(f"{key}.{k}", "unknown field")
            setattr(section, k, v)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    if not text.strip():
        raise ConfigError("<root>", f"{path} is empty")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"invalid JSON: {exc}") from None
    return from_dict(obj)
