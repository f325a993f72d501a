"""Run configuration: one plain-text file of ``section.key = value`` lines.

Every key has a default; unknown sections or keys are rejected.  Tuples are
written comma-separated.  The single ``run.seed`` drives both phantom
generation and training.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .nncore.losses import LossWeights
from .nncore.nets import ArchSpec
from .nncore.optim import OptimizerConfig
from .nncore.train import TrainConfig
from .phantom import PhantomConfig
from .postproc import PostprocConfig
from .preproc import PreprocConfig


@dataclass(frozen=True)
class DatasetConfig:
    cases: int = 10
    train_fraction: float = 0.7


@dataclass(frozen=True)
class MetricsConfig:
    hd95_mode: str = "3d"
    abnormal_threshold: float = 0.3
    n_thresholds: int = 1000

    def __post_init__(self):
        if self.hd95_mode not in ("2d", "3d"):
            raise ConfigError(f"metrics.hd95_mode must be 2d or 3d, got {self.hd95_mode!r}")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    workers: int = 1


# keys that are derived from run.seed rather than set directly
_DERIVED = {("phantom", "rng_seed"), ("train", "rng_seed")}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    preproc: PreprocConfig = field(default_factory=PreprocConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def seeded(self) -> "RunConfig":
        """Copy with run.seed pushed into the phantom and training sections."""
        s = self.run.seed
        return replace(self, phantom=replace(self.phantom, rng_seed=s),
                       train=replace(self.train, rng_seed=s))


def _phantom_diff(p: PhantomConfig) -> dict[str, str]:
    base = PhantomConfig()
    return {f"phantom.{f.name}": _format_value(getattr(p, f.name)) for f in fields(p)
            if f.name != "rng_seed" and getattr(p, f.name) != getattr(base, f.name)}


def _sections(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse_value(text: str, like):
    if isinstance(like, tuple):
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem = like[0] if like else 0.0
        # integer defaults still accept fractional entries for float ranges
        if isinstance(elem, int) and any("." in p for p in parts):
            elem = 0.0
        return tuple(_parse_scalar(p, elem) for p in parts)
    return _parse_scalar(text, like)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# Desk-scale preset: 128 px frame, narrow network, compact phantoms, 25
# cases split 20/5.  Smoothing is off because a radius-1 opening erases
# predicted periventricular caps only a few pixels thick.  The defaults stay
# the full 256 px architecture.
PRESETS = {
    "desk": {
        "dataset.cases": "25",
        "dataset.train_fraction": "0.8",
        "postproc.smoothing_radius": "0",
        **_phantom_diff(PhantomConfig.compact(128)),
        "preproc.target_size": "128",
        "preproc.min_component_area": "32",
        "arch.gen_channels": "8,16,32,64,64,64,64",
        "arch.disc_channels": "8,16,32,64",
        "train.epochs": "30",
    },
}


def apply_overrides(cfg: RunConfig, items: dict[str, str]) -> RunConfig:
    """Apply ``{"section.key": "text"}`` overrides; raises ConfigError on
    unknown keys or unparsable / invalid values."""
    sections = _sections(cfg)
    updates: dict[str, dict] = {}
    for dotted, text in items.items():
        sec, _, key = dotted.strip().partition(".")
        if sec not in sections:
            raise ConfigError(f"unknown config section {sec!r} in {dotted!r}")
        names = {f.name for f in fields(sections[sec])}
        if key not in names or (sec, key) in _DERIVED:
            hint = " (set run.seed instead)" if (sec, key) in _DERIVED else ""
            raise ConfigError(f"unknown config key {dotted!r}{hint}")
        like = getattr(sections[sec], key)
        try:
            updates.setdefault(sec, {})[key] = _parse_value(text, like)
        except ValueError as e:
            raise ConfigError(f"bad value for {dotted}: {e}") from None
    new = {}
    for sec, kv in updates.items():
        try:
            new[sec] = replace(sections[sec], **kv)
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(f"invalid [{sec}] settings: {e}") from None
    return replace(cfg, **new)


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value'")
        items[key.strip()] = value.strip()
    return items


def load_config(path=None, overrides: list[str] | None = None, preset: str | None = None) -> RunConfig:
    """Defaults, then the preset, then the file, then ``--set`` overrides."""
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = apply_overrides(cfg, PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = apply_overrides(cfg, parse_config_text(p.read_text(), str(p)))
    items = {}
    for ov in overrides or []:
        key, sep, value = ov.partition("=")
        if not sep:
            raise ConfigError(f"override {ov!r} is not key=value")
        items[key.strip()] = value
    return apply_overrides(cfg, items)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for sec, obj in _sections(cfg).items():
        for f in fields(obj):
            if (sec, f.name) in _DERIVED:
                continue
            lines.append(f"{sec}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "config.resolved.txt"
    path.write_text(dump_config(cfg))
    return path

