"""Run configuration and its flat ``section.field`` key space.

The same dot paths are used by config files (``key = value`` lines, ``#``
comments) and by command-line flags (``--filter.qp 0.9``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .zfilter import Scope

METHODS = ("base", "sam", "zsharp")
BASE_OPTIMIZERS = ("adamw", "sgd")
DATASETS = ("two-moons", "blobs", "spirals", "idx")
SCHEDULES = ("constant", "step")


class ConfigError(ValueError):
    """Invalid or unresolvable run configuration."""


@dataclass(frozen=True)
class DataConfig:
    name: str = "two-moons"
    n: int = 400
    noise: float = 0.1
    label_noise: float = 0.0
    classes: int = 2
    test_fraction: float = 0.25
    seed: int = 0
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32, 32)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "zsharp"
    base: str = "adamw"
    lr: float = 0.001
    weight_decay: float = 5e-5
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "step"
    factor: float = 0.75
    every: int = 10


@dataclass(frozen=True)
class AscentSection:
    rho: float | None = 0.05
    delta: float = 1e-8


@dataclass(frozen=True)
class FilterSection:
    qp: float | None = 0.95
    scope: str = "global"
    sigma_eps: float = 1e-12


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    drop_last: bool = False


@dataclass(frozen=True)
class ProbeSection:
    rho: float | None = 0.05


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    ascent: AscentSection = field(default_factory=AscentSection)
    filter: FilterSection = field(default_factory=FilterSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)

    @property
    def kind(self) -> str:
        return self.optimizer.kind

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **dotted) -> "RunConfig":
        """Copy with ``section__field=value`` or ``{"section.field": value}`` updates."""
        return set_values(self, {k.replace("__", "."): v for k, v in dotted.items()})

    def with_method(self, kind: str, *, qp: float | None = None, rho: float | None = None) -> "RunConfig":
        """Switch optimizer kind, keeping rho/qp consistent with it."""
        if kind not in METHODS:
            raise ConfigError(f"optimizer.kind must be one of {METHODS}, got {kind!r}")
        new_rho = None if kind == "base" else (rho if rho is not None else (self.ascent.rho or 0.05))
        new_qp = None if kind != "zsharp" else (qp if qp is not None else (self.filter.qp if self.filter.qp is not None else 0.95))
        return set_values(self, {"optimizer.kind": kind, "ascent.rho": new_rho, "filter.qp": new_qp})

    def validate(self) -> "RunConfig":
        d, o, s, a, f, t = self.data, self.optimizer, self.schedule, self.ascent, self.filter, self.train
        if d.name not in DATASETS:
            raise ConfigError(f"data.name must be one of {DATASETS}, got {d.name!r}")
        if d.name == "idx" and not (d.images and d.labels):
            raise ConfigError("data.images and data.labels are required for data.name = idx")
        if d.n < 2:
            raise ConfigError("data.n must be >= 2")
        if d.noise < 0:
            raise ConfigError(f"data.noise must be >= 0, got {d.noise}")
        if not 0.0 <= d.label_noise <= 1.0:
            raise ConfigError(f"data.label_noise must lie in [0, 1], got {d.label_noise}")
        if not 0.0 < d.test_fraction < 1.0:
            raise ConfigError(f"data.test_fraction must lie in (0, 1), got {d.test_fraction}")
        if d.classes < 2:
            raise ConfigError("data.classes must be >= 2")
        if not self.model.hidden or any(h < 1 for h in self.model.hidden):
            raise ConfigError("model.hidden must be a non-empty list of positive widths")
        if o.kind not in METHODS:
            raise ConfigError(f"optimizer.kind must be one of {METHODS}, got {o.kind!r}")
        if o.base not in BASE_OPTIMIZERS:
            raise ConfigError(f"optimizer.base must be one of {BASE_OPTIMIZERS}, got {o.base!r}")
        if not o.lr > 0:
            raise ConfigError(f"optimizer.lr must be positive, got {o.lr}")
        if o.weight_decay < 0 or not 0 <= o.momentum < 1:
            raise ConfigError("optimizer.weight_decay must be >= 0 and optimizer.momentum in [0, 1)")
        if not (0 < o.beta1 < 1 and 0 < o.beta2 < 1 and o.eps > 0):
            raise ConfigError("optimizer.beta1/beta2 must lie in (0, 1) and optimizer.eps > 0")
        if s.kind not in SCHEDULES:
            raise ConfigError(f"schedule.kind must be one of {SCHEDULES}, got {s.kind!r}")
        if s.every < 1 or not s.factor > 0:
            raise ConfigError("schedule.every must be >= 1 and schedule.factor > 0")
        if (a.rho is not None) != (o.kind in ("sam", "zsharp")):
            raise ConfigError(f"ascent.rho must be set exactly when optimizer.kind is sam or zsharp (kind={o.kind})")
        if a.rho is not None and not a.rho > 0:
            raise ConfigError(f"ascent.rho must be positive, got {a.rho}")
        if not a.delta > 0:
            raise ConfigError(f"ascent.delta must be positive, got {a.delta}")
        if (f.qp is not None) != (o.kind == "zsharp"):
            raise ConfigError(f"filter.qp must be set exactly when optimizer.kind is zsharp (kind={o.kind})")
        if f.qp is not None and not 0.0 <= f.qp < 1.0:
            raise ConfigError(f"filter.qp must lie in [0, 1), got {f.qp}")
        if f.scope not in {s.value for s in Scope}:
            raise ConfigError(f"filter.scope must be one of {[s.value for s in Scope]}, got {f.scope!r}")
        if not f.sigma_eps > 0:
            raise ConfigError("filter.sigma_eps must be positive")
        if t.epochs < 0 or t.batch_size < 1 or t.seed < 0:
            raise ConfigError("train.epochs >= 0, train.batch_size >= 1 and train.seed >= 0 are required")
        if self.probe.rho is not None and not self.probe.rho > 0:
            raise ConfigError("probe.rho must be positive (or 'none' to disable)")
        return self


# -- dot-path key space ----------------------------------------------------


def _field_types() -> dict[str, object]:
    out = {}
    for sec in dataclasses.fields(RunConfig):
        sec_cls = typing.get_type_hints(RunConfig)[sec.name]
        hints = typing.get_type_hints(sec_cls)
        for f in dataclasses.fields(sec_cls):
            out[f"{sec.name}.{f.name}"] = hints[f.name]
    return out


FIELD_TYPES = _field_types()
KEYS = tuple(FIELD_TYPES)


def default_value(key: str):
    sec, name = key.split(".", 1)
    return getattr(getattr(RunConfig(), sec), name)


def _coerce(key: str, tp, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        return _coerce(key, args[0], text)
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if origin is tuple:
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    return text


def set_values(cfg: RunConfig, values: dict[str, object]) -> RunConfig:
    """Apply dot-path updates; unknown keys raise :class:`ConfigError`."""
    by_section: dict[str, dict[str, object]] = {}
    for key, raw in values.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        sec, name = key.split(".", 1)
        by_section.setdefault(sec, {})[name] = _coerce(key, FIELD_TYPES[key], raw)
    changes = {sec: dataclasses.replace(getattr(cfg, sec), **upd) for sec, upd in by_section.items()}
    return dataclasses.replace(cfg, **changes)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def load_config_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text, str(path))


def resolve(file_values: dict[str, str], flag_values: dict[str, str]) -> RunConfig:
    """Defaults < file < flags, then drop rho/qp the chosen method does not use.

    ``ascent.rho`` and ``filter.qp`` are cleared only when they came from
    defaults; an explicit value for the wrong method is reported by
    :meth:`RunConfig.validate`.
    """
    merged = {**file_values, **flag_values}
    cfg = set_values(RunConfig(), merged)
    kind = cfg.optimizer.kind
    if kind != "zsharp" and "filter.qp" not in merged:
        cfg = set_values(cfg, {"filter.qp": None})
    if kind == "base" and "ascent.rho" not in merged:
        cfg = set_values(cfg, {"ascent.rho": None})
    return cfg.validate()


def to_file_text(cfg: RunConfig) -> str:
    lines = []
    for key in KEYS:
        sec, name = key.split(".", 1)
        v = getattr(getattr(cfg, sec), name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
