"""Experiment configuration: dataclass sections, INI files, overrides and hashing."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import CorpusConfig, DegradationConfig
from .predictor import PredictorConfig, RapOptions
from .tvq import ConfigError, LossWeights, NetConfig, ScaleConfig


@dataclass(frozen=True)
class NetWidths:
    stem_channels: int = 16
    trunk_channels: int = 48
    down_channels: int = 32


@dataclass(frozen=True)
class CodebookSpec:
    K: int = 64
    init_batch: int = 64
    revive_every: int = 100
    revive_threshold: int = 1
    revive_until: float = 0.8


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 2000
    n_test: int = 200
    train_seed: int = 0
    test_seed: int = 1
    texture_amplitude: tuple[float, float] = (0.12, 0.22)
    blur_sigma: tuple[float, float] = (0.0, 1.0)
    noise_sigma: tuple[float, float] = (0.0, 0.01)
    degradation_seed: int = 0

    def corpus_config(self, scale: ScaleConfig) -> CorpusConfig:
        deg = DegradationConfig(self.blur_sigma, 4, self.noise_sigma, self.degradation_seed)
        return CorpusConfig(scale.hr_size, scale.xdown_factor, self.texture_amplitude, deg)


@dataclass(frozen=True)
class Budget:
    stage1a_steps: int = 600
    stage1a_batch: int = 32
    stage1_steps: int = 1500
    stage1_batch: int = 8
    stage1_lr: float = 2e-3
    stage1_lr_final: float = 2e-4
    code_steps: int = 6000
    code_batch: int = 16
    code_lr: float = 1e-3
    rap_steps: int = 200
    rap_batch: int = 16
    rap_lr: float = 3e-5
    lambda_ce: float = 0.5


@dataclass(frozen=True)
class SweepSpec:
    codebook_sizes: tuple[int, ...] = (16, 64, 256)
    structure_factors: tuple[int, ...] = (32, 16, 8)
    probe_images: int = 100
    grid_images: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    scale: ScaleConfig = field(default_factory=ScaleConfig)
    net: NetWidths = field(default_factory=NetWidths)
    codebook: CodebookSpec = field(default_factory=CodebookSpec)
    weights: LossWeights = field(default_factory=LossWeights)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    budget: Budget = field(default_factory=Budget)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    rap: RapOptions = field(default_factory=RapOptions)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        validate(self)

    def net_config(self, variant: str, K: int | None = None) -> NetConfig:
        return NetConfig(**asdict(self.net), codebook_size=K or self.codebook.K, variant=variant)

    def with_scale(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, scale=dataclasses.replace(self.scale, **changes))

    def with_codebook(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, codebook=dataclasses.replace(self.codebook, **changes))


SECTIONS = ("scale", "net", "codebook", "weights", "corpus", "budget", "predictor", "rap", "sweep")
RUN_KEYS = ("seed", "out_dir")


def validate(cfg: ExperimentConfig) -> None:
    s = cfg.scale
    if cfg.codebook.K < 2:
        raise ConfigError("codebook.K must be >= 2")
    if s.hr_size % 4:
        raise ConfigError("scale.hr_size must be divisible by the x4 LR factor")
    for f in cfg.sweep.structure_factors:
        if f < 1 or s.hr_size % f or f & (f - 1):
            raise ConfigError(f"sweep.structure_factors: {f} is not a power-of-two divisor of hr_size={s.hr_size}")
        if f < s.texture_factor or f < s.xdown_factor:
            raise ConfigError(f"sweep.structure_factors: {f} is finer than the texture grid or X_down")
    for k in cfg.sweep.codebook_sizes:
        if k < 2:
            raise ConfigError(f"sweep.codebook_sizes: {k} < 2")
    if cfg.corpus.n_train < 1 or cfg.corpus.n_test < 1:
        raise ConfigError("corpus.n_train and corpus.n_test must be >= 1")
    for name, value in asdict(cfg.budget).items():
        if value < 0:
            raise ConfigError(f"budget.{name} must be >= 0")
    if cfg.sweep.probe_images > cfg.corpus.n_test:
        raise ConfigError("sweep.probe_images exceeds corpus.n_test")


# ----------------------------------------------------------------------
# parsing
# ----------------------------------------------------------------------


def _parse_value(section: str, key: str, raw: str, typ):
    where = f"{section}.{key}" if section else key
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if origin is tuple:
            args = typing.get_args(typ)
            inner = args[0]
            parts = [p.strip() for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            return tuple(_parse_value(section, key, p, inner) for p in parts)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _section_cls(name: str):
    return _field_types(ExperimentConfig)[name]


def apply_updates(cfg: ExperimentConfig, updates: dict[str, str]) -> ExperimentConfig:
    """Apply ``{"section.key": "raw value"}`` (or top-level ``seed``/``out_dir``) string updates."""
    per_section: dict[str, dict] = {}
    top: dict = {}
    for dotted, raw in updates.items():
        if "." not in dotted:
            if dotted not in RUN_KEYS:
                raise ConfigError(f"{dotted}: unknown key")
            top[dotted] = _parse_value("", dotted, raw, _field_types(ExperimentConfig)[dotted])
            continue
        section, key = dotted.split(".", 1)
        if section == "run" and key in RUN_KEYS:
            top[key] = _parse_value("run", key, raw, _field_types(ExperimentConfig)[key])
            continue
        if section not in SECTIONS:
            raise ConfigError(f"{dotted}: unknown section {section!r}")
        types = _field_types(_section_cls(section))
        if key not in types:
            raise ConfigError(f"{dotted}: unknown key {key!r} in section {section!r}")
        per_section.setdefault(section, {})[key] = _parse_value(section, key, raw, types[key])
    changes = dict(top)
    try:
        for section, vals in per_section.items():
            changes[section] = dataclasses.replace(getattr(cfg, section), **vals)
        return dataclasses.replace(cfg, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults <- INI file <- ``section.key=value`` overrides."""
    updates: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive (codebook.K)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc.message}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                updates[f"{section}.{key}"] = value
    for item in overrides or []:
        key, eq, value = item.partition("=")
        if not eq or not key.strip():
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        updates[key.strip()] = value
    return apply_updates(ExperimentConfig(), updates)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def dump_ini(cfg: ExperimentConfig) -> str:
    lines = ["[run]", f"seed = {cfg.seed}", f"out_dir = {cfg.out_dir}", ""]
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in asdict(getattr(cfg, section)).items():
            if isinstance(value, (tuple, list)):
                value = ", ".join(map(str, value))
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def canonical_hash(obj) -> str:
    """sha256 of the canonical (sorted-key, compact) JSON form."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that can change a metric; the output directory is excluded."""
    d = config_to_dict(cfg)
    d.pop("out_dir")
    return canonical_hash(d)
