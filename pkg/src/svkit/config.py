"""Run configuration: flat "section.key = value" text files.

Defaults carry the reference recipe: AAM margin 0.2 (0.5 for large-margin
fine-tuning), 3 s crops (6 s LMFT), augmentation probability 0.6, imposter
cohort top-k 600, epochs 10/5/2, 40-dim filterbank at 25 ms / 10 ms.
Unknown keys are rejected; CLI --set overrides win over the file.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .audio import AugmentConfig, FbankConfig
from .ecapa import EcapaConfig
from .errors import ConfigError
from .training import TrainSchedule
from .upstream import MockUpstreamConfig


@dataclass(frozen=True)
class ScoringConfig:
    cohort_top_k: int = 600
    calibration_trials: int = 30000

    def __post_init__(self):
        if self.cohort_top_k < 1 or self.calibration_trials < 1:
            raise ConfigError("scoring counts must be >= 1")


@dataclass(frozen=True)
class AamSettings:
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if not 0 <= self.margin < 1.5707963267948966:
            raise ConfigError("aam.margin must lie in [0, pi/2)")
        if self.scale <= 0:
            raise ConfigError("aam.scale must be positive")


@dataclass(frozen=True)
class PlantSettings:
    """Speaker-information injection for controlled experiments; layer -1 disables."""

    layer: int = -1
    strength: float = 0.0

    @property
    def enabled(self) -> bool:
        return self.layer >= 0


@dataclass(frozen=True)
class PathSettings:
    noise_dir: str = ""
    rir_dir: str = ""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    fbank: FbankConfig = field(default_factory=FbankConfig)
    upstream: MockUpstreamConfig = field(default_factory=MockUpstreamConfig)
    ecapa: EcapaConfig = field(default_factory=EcapaConfig)
    aam: AamSettings = field(default_factory=AamSettings)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    plant: PlantSettings = field(default_factory=PlantSettings)
    paths: PathSettings = field(default_factory=PathSettings)


_SECTIONS = {
    "fbank": FbankConfig,
    "upstream": MockUpstreamConfig,
    "ecapa": EcapaConfig,
    "aam": AamSettings,
    "schedule": TrainSchedule,
    "augment": AugmentConfig,
    "scoring": ScoringConfig,
    "plant": PlantSettings,
    "paths": PathSettings,
}


def _parse_value(text: str, current):
    """Parse a config value against the type of the current (default) value."""
    text = text.strip()
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"expected an integer, got {text!r}") from None
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"expected a number, got {text!r}") from None
    if isinstance(current, tuple):
        if not text:
            return ()
        items = [p.strip() for p in text.split(",")]
        if current and isinstance(current[0], (int, float)) and not isinstance(current[0], bool):
            kind = type(current[0])
            try:
                return tuple(kind(p) for p in items)
            except ValueError:
                raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None
        return tuple(items)
    return text


def _apply(cfg: RunConfig, dotted: str, raw: str) -> RunConfig:
    if "." not in dotted:
        if dotted == "seed":
            return replace(cfg, seed=_parse_value(raw, cfg.seed))
        raise ConfigError(f"unknown config key: {dotted}")
    section, key = dotted.split(".", 1)
    if section not in _SECTIONS:
        raise ConfigError(f"unknown config section: {section}")
    sub = getattr(cfg, section)
    names = {f.name for f in fields(sub)}
    if key not in names:
        raise ConfigError(f"unknown config key: {section}.{key}")
    try:
        new_sub = replace(sub, **{key: _parse_value(raw, getattr(sub, key))})
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"invalid value for {section}.{key}: {exc}") from None
    return replace(cfg, **{section: new_sub})


def load_config(path=None, overrides=()) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, and --set overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'section.key = value'")
            dotted, raw = stripped.split("=", 1)
            try:
                cfg = _apply(cfg, dotted.strip(), raw)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    for dotted, raw in overrides:
        cfg = _apply(cfg, dotted, raw)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Canonical text form; load(dump(cfg)) reproduces cfg."""
    lines = [f"seed = {cfg.seed}"]
    for section in _SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            value = getattr(sub, f.name)
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{section}.{f.name} = {text}")
    return "\n".join(lines) + "\n"
