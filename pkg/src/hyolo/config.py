"""Plain ``key=value`` configuration files.

One setting per line, ``#`` starts a comment.  Each config is a dataclass;
unknown keys are rejected and every value is range-checked after parsing, so
a bad file fails with a :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TypeVar

from .errors import ConfigError

T = TypeVar("T")


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(key: str, value: str, like: Any) -> Any:
    try:
        if isinstance(like, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return value.lower() in ("true", "1")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, tuple):
            return tuple(v.strip() for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(like).__name__}") from None
    return value


def from_mapping(cls: type[T], values: dict[str, Any]) -> T:
    """Build ``cls`` from string (or already typed) values; unknown keys raise."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in values.items():
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        kwargs[key] = _convert(key, value, default) if isinstance(value, str) else value
    return cls(**kwargs)


def from_text(cls: type[T], text: str) -> T:
    return from_mapping(cls, parse_kv(text))


def load(cls: type[T], path) -> T:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return from_text(cls, text)


def to_text(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {message}")


@dataclass(frozen=True)
class RunConfig:
    """Training and evaluation settings.

    The first block mirrors the usual detector hyperparameter names; the
    second holds the hierarchy-specific knobs.  Defaults are desk-scale.
    """

    epochs: int = 60
    patience: int = 30
    batch: int = 8
    imgsz: int = 64
    iou: float = 0.7
    conf: float = 0.25
    box: float = 7.5
    dfl: float = 1.5
    cls: float = 2.0
    lr0: float = 0.01
    lrf: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    warmup_epochs: float = 3.0
    fliplr: float = 0.5
    translate: float = 0.1
    seed: int = 0

    hier_depth: int = 3
    alpha: float = 0.0
    variant: str = "V4"
    level_agg: str = "mean"
    parent_source: str = "predicted"
    width: int = 32
    head_width: int = 32
    reg_max: int = 8
    residual: int = 0
    norm: bool = False
    assign: str = "center"
    match_iou: float = 0.5
    metric_mode: str = "macro"

    def __post_init__(self):
        check(self.epochs >= 1, "epochs", f"must be >= 1, got {self.epochs}")
        check(self.patience >= 0, "patience", f"must be >= 0, got {self.patience}")
        check(self.batch >= 1, "batch", f"must be >= 1, got {self.batch}")
        check(self.imgsz >= 8 and self.imgsz % 8 == 0, "imgsz", f"must be a positive multiple of 8, got {self.imgsz}")
        check(0 < self.iou <= 1, "iou", f"must be in (0, 1], got {self.iou}")
        check(0 <= self.conf <= 1, "conf", f"must be in [0, 1], got {self.conf}")
        check(0 < self.match_iou <= 1, "match_iou", f"must be in (0, 1], got {self.match_iou}")
        for key in ("box", "dfl", "cls", "alpha"):
            check(getattr(self, key) >= 0, key, f"must be >= 0, got {getattr(self, key)}")
        check(self.lr0 >= 0, "lr0", f"must be >= 0, got {self.lr0}")
        check(0 < self.lrf <= 1, "lrf", f"must be in (0, 1], got {self.lrf}")
        check(0 <= self.momentum < 1, "momentum", f"must be in [0, 1), got {self.momentum}")
        check(1 <= self.hier_depth <= 8, "hier_depth", f"must be in [1, 8], got {self.hier_depth}")
        check(self.variant.upper() in ("V1", "V2", "V3", "V4", "V5", "V6", "FLAT"), "variant",
              f"must be one of V1..V6 or FLAT, got {self.variant!r}")
        check(self.level_agg in ("mean", "sum"), "level_agg", f"must be mean or sum, got {self.level_agg!r}")
        check(self.parent_source in ("predicted", "ground_truth"), "parent_source",
              f"must be predicted or ground_truth, got {self.parent_source!r}")
        check(self.width >= 2, "width", f"must be >= 2, got {self.width}")
        check(self.head_width >= 1, "head_width", f"must be >= 1, got {self.head_width}")
        check(self.reg_max >= 2, "reg_max", f"must be >= 2, got {self.reg_max}")
        check(self.residual >= 0, "residual", f"must be >= 0, got {self.residual}")
        check(self.assign in ("center", "neighbors"), "assign",
              f"must be center or neighbors, got {self.assign!r}")
        check(self.metric_mode in ("macro", "micro"), "metric_mode",
              f"must be macro or micro, got {self.metric_mode!r}")
