"""Versioned ``key = value`` run configuration.

Only paths and seeds go on the command line; every other knob lives here so a
run is described by a diffable text file. ``dump(Config())`` lists every key
with its default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .losses import KD_ALPHA, PRUNE_LAMBDA
from .optim import ADAMAX_LR, OBPROX_LR
from .pruner import BRANCH_THRESHOLD

CONFIG_HEADER = "minivfi-config v1"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str) -> int | None:
    return None if s.lower() in ("none", "") else int(s)


def _fmt(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Any, Any]] = {
    "data.n_sequences": (int, 200),
    "data.res": (int, 64),
    "data.channels": (int, 1),
    "teacher.epochs": (int, 20),
    "teacher.lr": (float, ADAMAX_LR),
    "teacher.batch": (int, 8),
    "teacher.augment": (_bool, False),
    "prune.epochs": (int, 20),
    "prune.lambda": (float, PRUNE_LAMBDA),
    "prune.lr": (float, OBPROX_LR),
    "prune.batch": (int, 8),
    "prune.prox_epochs": (_opt_int, None),
    "prune.orthant_epochs": (_opt_int, None),
    "prune.alternating": (_bool, False),
    "plan.branch_threshold": (float, BRANCH_THRESHOLD),
    "student.epochs": (int, 20),
    "student.alpha": (float, KD_ALPHA),
    "student.lr": (float, ADAMAX_LR),
    "student.batch": (int, 8),
    "student.cache_teacher": (_bool, False),
    "student.augment": (_bool, False),
    "eval.split": (str, "val"),
    "eval.bench_reps": (int, 10),
    "eval.bench_res": (int, 64),
    "report.format": (str, "text"),
}

_CHOICES = {"eval.split": ("train", "val", "test"), "report.format": ("text", "csv", "jsonl")}
_MINIMUM = {"data.n_sequences": 10, "data.res": 16, "data.channels": 1, "teacher.epochs": 1,
            "teacher.batch": 1, "prune.epochs": 1, "prune.batch": 1, "student.epochs": 1,
            "student.batch": 1, "eval.bench_reps": 10, "eval.bench_res": 16}


@dataclass
class Config:
    values: dict[str, Any] = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, **kv) -> "Config":
        vals = dict(self.values)
        for k, v in kv.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        return Config(vals)


def check(cfg: Config) -> Config:
    for key, lo in _MINIMUM.items():
        if cfg[key] < lo:
            raise ConfigError(f"{key} must be >= {lo}, got {cfg[key]}")
    for key, allowed in _CHOICES.items():
        if cfg[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {cfg[key]!r}")
    for key in ("teacher.lr", "prune.lr", "student.lr"):
        if cfg[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    if cfg["prune.lambda"] < 0 or cfg["student.alpha"] < 0 or cfg["plan.branch_threshold"] < 0:
        raise ConfigError("prune.lambda, student.alpha and plan.branch_threshold must be >= 0")
    return cfg


def parse(text: str) -> Config:
    """Parse config text; keys not given keep their defaults."""
    lines = text.splitlines()
    body = [ln.split("#", 1)[0].strip() for ln in lines]
    first = next((i for i, ln in enumerate(body) if ln), None)
    if first is None or body[first] != CONFIG_HEADER:
        raise ConfigError(f"config must start with {CONFIG_HEADER!r}")
    cfg = Config()
    seen = set()
    for no, ln in enumerate(body[first + 1 :], start=first + 2):
        if not ln:
            continue
        key, sep, raw = ln.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ConfigError(f"line {no}: expected 'key = value', got {ln!r}")
        if key not in SCHEMA:
            raise ConfigError(f"line {no}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {no}: duplicate key {key!r}")
        seen.add(key)
        conv = SCHEMA[key][0]
        try:
            cfg.values[key] = conv(raw)
        except ValueError as exc:
            raise ConfigError(f"line {no}: bad value for {key}: {exc}") from None
    return check(cfg)


def load(path) -> Config:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def dump(cfg: Config) -> str:
    lines = [CONFIG_HEADER]
    section = None
    for key in SCHEMA:
        sec = key.split(".", 1)[0]
        if sec != section:
            if section is not None:
                lines.append("")
            section = sec
        lines.append(f"{key} = {_fmt(cfg[key])}")
    return "\n".join(lines) + "\n"
