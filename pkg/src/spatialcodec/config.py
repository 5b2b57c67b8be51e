"""Plain-text ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .codec import CodecConfig
from .roomsim import DEFAULT_SPACINGS, RoomSimConfig

CONFIG_ECHO_NAME = "run_config.txt"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    # codec
    fft_size: int = 640
    hop_size: int = 320
    bands: int = 6
    rvq_stages: int = 2
    codebook_size: int = 1024
    L: int = 4
    K: int = 1
    block_len: int = 1
    ref_mode: str = "subband_rvq"
    spatial_mode: str = "rvq"
    ref_index: int = 0
    ref_dim: int = 32
    rel_reg: float = 1e-3
    sample_rate: int = 16000
    # codebook training
    max_iters: int = 100
    tol: float = 1e-6
    # room simulation
    room_min: float = 3.0
    room_max: float = 10.0
    distance_min: float = 0.5
    distance_max: float = 5.0
    rt60_min: float = 0.0
    rt60_max: float = 0.7
    wall_margin: float = 0.3
    peak: float = 0.9
    spacings: tuple = DEFAULT_SPACINGS
    max_duration: float | None = None
    # metrics
    beams: int = 50
    diagonal_loading: float = 1e-2
    music_grid_step: float = 1.0
    feature_freqs: tuple = (1000.0, 3000.0)

    def codec_config(self) -> CodecConfig:
        return CodecConfig(**{f.name: getattr(self, f.name) for f in fields(CodecConfig)})

    def roomsim_config(self) -> RoomSimConfig:
        return RoomSimConfig(**{f.name: getattr(self, f.name) for f in fields(RoomSimConfig)})

    def validate(self) -> "RunConfig":
        self.codec_config()
        self.roomsim_config()
        if self.beams < 1 or self.diagonal_loading <= 0 or self.music_grid_step <= 0:
            raise ConfigError("beams, diagonal_loading and music_grid_step must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    def echo(self, directory) -> Path:
        path = Path(directory) / CONFIG_ECHO_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, raw: str):
    default = _FIELDS[name].default
    raw = raw.strip()
    try:
        if name == "max_duration":
            return None if raw.lower() in ("", "none") else float(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw


def parse_assignments(items, source: str = "<flags>") -> dict:
    out = {}
    for lineno, line in enumerate(items, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (``key=value`` strings)."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_assignments(path.read_text().splitlines(), str(path)))
    values.update(parse_assignments(overrides))
    try:
        return dataclasses.replace(RunConfig(), **values).validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
