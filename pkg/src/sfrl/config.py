"""Experiment configuration: a flat ``key = value`` file format, overrides and presets."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .maze import MapError, SensorConfig, resolve_map
from .training import TrainSchedule

AGENTS = ("sf", "dqn", "dqn-finetune", "dqn-fixfeature", "imitation", "astar", "random")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source is not None and line is not None:
            where = f"{source}:{line}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.line = line


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


@dataclass
class ExperimentConfig:
    agent: str = "sf"
    maps: tuple[str, ...] = ("map1",)
    seed: int = 0
    output_dir: str = ""
    # schedule
    total_steps: int = 200_000
    warmup_steps: int = 2_000
    update_every: int = 4
    target_sync_every: int = 250
    eval_every: int = 5_000
    eval_episodes: int = 50
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_anneal_steps: int = 30_000
    transfer_epsilon_start: float = 0.3  # epsilon_start for every task after the first in a transfer run
    gamma: float = 0.95
    batch_size: int = 64
    learning_rate: float = 2.5e-4
    buffer_capacity: int = 50_000
    retained_states: int = 2_048
    stop_after_success: int = 2
    # environment
    rays: int = 16
    fov: float = 180.0
    max_range: float = 10.0
    history: int = 4
    slip_prob: float = 0.05
    max_steps: int = 200
    # model
    phi_dim: int = 64
    encoder_hidden: tuple[int, ...] = (256, 128)
    decoder_hidden: tuple[int, ...] = (128, 256)
    head_hidden: int = 256
    multitask_sf: bool = False
    sf_steps: int = 2
    copy_init: bool = True
    imitation_samples: int = 20_000
    record_wall_clock: bool = False

    def schedule(self, **overrides) -> TrainSchedule:
        names = {f.name for f in fields(TrainSchedule)}
        kw = {n: getattr(self, n) for n in names}
        kw.update(overrides)
        return TrainSchedule(**kw)

    def sensor(self) -> SensorConfig:
        return SensorConfig(self.rays, self.fov, self.max_range)

    def load_maps(self):
        out = []
        for m in self.maps:
            try:
                out.append(resolve_map(m))
            except (MapError, OSError) as e:
                raise ConfigError(f"map {m!r}: {e}") from None
        return out

    def to_text(self) -> str:
        """Every field, defaults included, in the file format ``parse_config`` reads."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_PARSERS = {}
for _f in fields(ExperimentConfig):
    _d = _f.default
    if isinstance(_d, bool):
        _PARSERS[_f.name] = _bool
    elif isinstance(_d, int):
        _PARSERS[_f.name] = int
    elif isinstance(_d, float):
        _PARSERS[_f.name] = float
    elif _f.name == "maps":
        _PARSERS[_f.name] = _str_list
    elif isinstance(_d, tuple):
        _PARSERS[_f.name] = _int_list
    else:
        _PARSERS[_f.name] = str

PRESETS: dict[str, dict[str, str]] = {
    "scratch-map1": {"agent": "sf", "maps": "map1"},
    "scratch-map2": {"agent": "sf", "maps": "map2"},
    "scratch-map4": {"agent": "sf", "maps": "map4"},
    "transfer-map1-map2": {"agent": "sf", "maps": "map1, map2"},
    "transfer-map3-map4": {"agent": "sf", "maps": "map3, map4"},
    "imitation-map1": {"agent": "imitation", "maps": "map1"},
    "dqn-scratch-map1": {"agent": "dqn", "maps": "map1"},
    "dqn-scratch-map2": {"agent": "dqn", "maps": "map2"},
    "dqn-finetune-map1-map2": {"agent": "dqn-finetune", "maps": "map1, map2"},
    "dqn-finetune-map3-map4": {"agent": "dqn-finetune", "maps": "map3, map4"},
    "dqn-fixfeature-map1-map2": {"agent": "dqn-fixfeature", "maps": "map1, map2"},
    "dqn-fixfeature-map3-map4": {"agent": "dqn-fixfeature", "maps": "map3, map4"},
    "oracle-map1": {"agent": "astar", "maps": "map1", "total_steps": "0"},
}


def _apply(values: dict, key: str, raw: str, line: int | None, source: str | None) -> None:
    key = key.strip().replace("-", "_")
    if key not in _PARSERS:
        raise ConfigError(f"unknown key {key!r}", line, source)
    try:
        values[key] = _PARSERS[key](raw.strip())
    except ValueError as e:
        raise ConfigError(f"{key}: {e}", line, source) from None


def parse_lines(text: str, source: str | None = None) -> dict:
    values: dict = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", n, source)
        key, value = line.split("=", 1)
        _apply(values, key, value, n, source)
    return values


def parse_config(path=None, overrides: dict[str, str] | None = None,
                 preset: str | None = None, check_maps: bool = True) -> ExperimentConfig:
    """Build a config from defaults, then a preset, then a file, then overrides.

    Later sources win. ``overrides`` holds raw strings as typed on a command line.
    """
    values: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for k, v in PRESETS[preset].items():
            _apply(values, k, v, None, None)
    line_of = {}
    if path is not None:
        text = Path(path).read_text()
        file_values = parse_lines(text, str(path))
        values.update(file_values)
        for n, raw in enumerate(text.splitlines(), 1):
            key = raw.split("#", 1)[0].split("=", 1)[0].strip().replace("-", "_")
            if key:
                line_of[key] = n
    for k, v in (overrides or {}).items():
        _apply(values, k, str(v), None, None)
        line_of.pop(k.replace("-", "_"), None)
    cfg = ExperimentConfig(**values)
    _validate(cfg, line_of, str(path) if path is not None else None)
    if check_maps:
        cfg.load_maps()
    return cfg


def _validate(cfg: ExperimentConfig, line_of: dict, source: str | None) -> None:
    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}", line_of.get(key), source)

    if cfg.agent not in AGENTS:
        fail("agent", f"unknown agent {cfg.agent!r}; choose from {AGENTS}")
    if not cfg.maps:
        fail("maps", "at least one map is required")
    if not 0.0 <= cfg.gamma < 1.0:
        fail("gamma", "must lie in [0, 1)")
    if not 0.0 <= cfg.slip_prob <= 1.0:
        fail("slip_prob", "must lie in [0, 1]")
    for key in ("epsilon_start", "epsilon_end", "transfer_epsilon_start"):
        if not 0.0 <= getattr(cfg, key) <= 1.0:
            fail(key, "must lie in [0, 1]")
    if cfg.epsilon_end > cfg.epsilon_start:
        fail("epsilon_end", "must not exceed epsilon_start")
    if cfg.epsilon_end > cfg.transfer_epsilon_start:
        fail("transfer_epsilon_start", "must not be below epsilon_end")
    if cfg.total_steps < 0:
        fail("total_steps", "must be non-negative")
    if cfg.total_steps > 0 and cfg.warmup_steps >= cfg.total_steps:
        fail("warmup_steps", "must be smaller than total_steps")
    for key in ("update_every", "target_sync_every", "eval_every", "eval_episodes", "batch_size",
                "buffer_capacity", "history", "max_steps", "phi_dim", "head_hidden",
                "imitation_samples", "sf_steps"):
        if getattr(cfg, key) <= 0:
            fail(key, "must be positive")
    if cfg.rays < 2:
        fail("rays", "need at least 2 rays")
    if not 0 < cfg.fov <= 360 or cfg.max_range <= 0:
        fail("fov" if not 0 < cfg.fov <= 360 else "max_range", "out of range")
    if cfg.learning_rate <= 0:
        fail("learning_rate", "must be positive")
