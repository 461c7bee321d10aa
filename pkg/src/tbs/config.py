"""Run configuration: a flat dataclass with a line-based text format.

The file format is ``key = value`` with ``#`` comments and dotted section
keys (for example ``gen.shots = 1``). Parsing is strict: unknown or
duplicate keys are hard errors, and the parse <-> serialize round trip is
lossless (floats are written with ``repr``).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Tuple


class ConfigError(ValueError):
    """Config file is malformed, has unknown keys, or fails validation."""


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/default"
    image_size: int = 64
    classes: int = 8
    shots: int = 1
    fold: int = 0
    difficulty_weights: Tuple[float, float, float, float] = (0.25, 0.25, 0.25, 0.25)
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 4
    eval_episodes: int = 1000
    use_qs: bool = True
    use_ts: bool = True


# key in the file -> (dataclass field, parse, serialize)
def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_weights(s: str) -> Tuple[float, ...]:
    parts = [p.strip() for p in s.split(",")]
    if len(parts) != 4:
        raise ConfigError(f"difficulty weights need 4 values, got {len(parts)}")
    return tuple(float(p) for p in parts)


_KEYS = {
    "seed": ("seed", int, str),
    "out_dir": ("out_dir", str, str),
    "gen.image_size": ("image_size", int, str),
    "gen.classes": ("classes", int, str),
    "gen.shots": ("shots", int, str),
    "gen.fold": ("fold", int, str),
    "gen.difficulty_weights": ("difficulty_weights", _parse_weights,
                               lambda v: ",".join(repr(x) for x in v)),
    "train.lr": ("lr", float, repr),
    "train.steps": ("steps", int, str),
    "train.batch": ("batch", int, str),
    "eval.episodes": ("eval_episodes", int, str),
    "ablation.use_qs": ("use_qs", _parse_bool, lambda v: "true" if v else "false"),
    "ablation.use_ts": ("use_ts", _parse_bool, lambda v: "true" if v else "false"),
}


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.image_size != 64:
        raise ConfigError(f"image size must be 64, got {cfg.image_size}")
    if cfg.classes != 8:
        raise ConfigError(f"class count must be 8, got {cfg.classes}")
    if cfg.fold not in (0, 1, 2, 3):
        raise ConfigError(f"fold must be in 0..3, got {cfg.fold}")
    if cfg.shots < 1:
        raise ConfigError(f"shots must be >= 1, got {cfg.shots}")
    if cfg.batch < 1:
        raise ConfigError(f"batch must be >= 1, got {cfg.batch}")
    if cfg.steps < 0:
        raise ConfigError(f"steps must be >= 0, got {cfg.steps}")
    if cfg.eval_episodes < 1:
        raise ConfigError(f"eval episodes must be >= 1, got {cfg.eval_episodes}")
    w = cfg.difficulty_weights
    if len(w) != 4 or min(w) < 0 or sum(w) <= 0:
        raise ConfigError(f"bad difficulty weights {w}")
    return cfg


def parse_config(text: str) -> RunConfig:
    values = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        field_name, parse, _ = _KEYS[key]
        try:
            values[field_name] = parse(val)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
    return validate(RunConfig(**values))


def config_to_text(cfg: RunConfig) -> str:
    by_field = {f: (k, ser) for k, (f, _, ser) in _KEYS.items()}
    lines = []
    for f in fields(RunConfig):
        key, ser = by_field[f.name]
        lines.append(f"{key} = {ser(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))
