"""Flat ``key=value`` run configuration with dotted sections.

A config file looks like::

    # comments run to end of line
    synth.seed = 7
    train.attention_mode = sac
    sinkhorn.epsilon = 1e-3
    eval.iou_thresholds = 0.3, 0.5, 0.7

Every key must name a known field; values are coerced to the type of the
field's default.  Command-line overrides are applied on top of the file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .datagen import SynthConfig
from .errors import ConfigError
from .localizer import ATTENTION_MODES, LocalizerConfig
from .metrics import EvalConfig
from .ot import SinkhornConfig
from .sac import SACConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class ExperimentOptions:
    modes: tuple = ATTENTION_MODES
    seeds: tuple = (0, 1, 2, 3, 4, 5)
    baseline: str = "none"
    treatment: str = "sac"
    figures: bool = True


@dataclass(frozen=True)
class PathOptions:
    data: str = ""
    out: str = ""
    run: str = ""
    log: str = ""


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: LocalizerConfig = field(default_factory=LocalizerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentOptions = field(default_factory=ExperimentOptions)
    paths: PathOptions = field(default_factory=PathOptions)

    @property
    def sac(self) -> SACConfig:
        return self.train.sac

    @property
    def sinkhorn(self) -> SinkhornConfig:
        return self.train.sac.sinkhorn

    def to_text(self) -> str:
        """Canonical ``key=value`` rendering; parses back to an equal config."""
        lines = []
        for section, obj in _sections(self):
            for f in fields(obj):
                if isinstance(getattr(obj, f.name), (SACConfig, SinkhornConfig)):
                    continue
                lines.append(f"{section}.{f.name} = {_render(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _sections(cfg: RunConfig):
    return [
        ("synth", cfg.synth),
        ("train", cfg.train),
        ("sac", cfg.train.sac),
        ("sinkhorn", cfg.train.sac.sinkhorn),
        ("eval", cfg.eval),
        ("experiment", cfg.experiment),
        ("paths", cfg.paths),
    ]


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ", ".join(f"{k}:{v}" for k, v in sorted(value.items()))
    if isinstance(value, (tuple, list)):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def known_keys() -> list[str]:
    keys = []
    for section, obj in _sections(RunConfig()):
        for f in fields(obj):
            if not isinstance(getattr(obj, f.name), (SACConfig, SinkhornConfig)):
                keys.append(f"{section}.{f.name}")
    return keys


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings from a flat config file."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    return parse_config_text(p.read_text(encoding="utf-8"), str(p))


def parse_assignment(item: str) -> tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {item!r}")
    return key.strip(), value.strip()


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            return None if raw.lower() in ("none", "") else float(raw)
        if isinstance(default, dict):
            pairs = [p.split(":", 1) for p in raw.split(",") if p.strip()]
            return {int(k): v.strip() for k, v in pairs}
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            proto = default[0] if default else ""
            return tuple(_coerce(key, s, proto) for s in items)
        return raw
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def build_run_config(file_values: dict[str, str] | None = None,
                     overrides: dict[str, str] | None = None,
                     base: RunConfig | None = None) -> RunConfig:
    """Merge file values and overrides (overrides win) onto ``base``."""
    merged = dict(file_values or {})
    merged.update(overrides or {})
    base = base or RunConfig()
    sections = dict(_sections(base))
    updates: dict[str, dict] = {name: {} for name in sections}
    for key, raw in merged.items():
        section, _, name = key.partition(".")
        obj = sections.get(section)
        names = {f.name for f in fields(obj)} if obj is not None else set()
        if not name or name not in names or isinstance(getattr(obj, name), (SACConfig, SinkhornConfig)):
            raise ConfigError(f"unknown config key {key!r}")
        updates[section][name] = _coerce(key, raw, getattr(obj, name))
    if "classes" in updates["synth"] and "modality_preference" not in updates["synth"]:
        updates["synth"]["modality_preference"] = {}  # fall back to the default split
    try:
        sinkhorn = replace(base.sinkhorn, **updates["sinkhorn"])
        sac = replace(base.sac, sinkhorn=sinkhorn, **updates["sac"])
        return RunConfig(
            synth=replace(base.synth, **updates["synth"]),
            train=replace(base.train, sac=sac, **updates["train"]),
            eval=replace(base.eval, **updates["eval"]),
            experiment=replace(base.experiment, **updates["experiment"]),
            paths=replace(base.paths, **updates["paths"]),
        )
    except ConfigError:
        raise
    except Exception as exc:  # dataclass validation from the component modules
        raise ConfigError(str(exc)) from exc


def as_dict(cfg: RunConfig) -> dict:
    return {section: asdict(obj) for section, obj in _sections(cfg) if section not in ("sac", "sinkhorn")}
