"""
Run configuration.

Configuration files are INI-style structured text with the sections
[corpus], [model], [router], [schedule], [optim], [ablation] and [eval].
Every key has a default; the optimiser, prompt length, query count and loss
weights default to the published hyperparameters. Overrides use dotted keys
(``optim.lr=1e-4``) and are applied in order, so the last write wins.
"""

import configparser
import dataclasses
import logging
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .exceptions import ConfigError
from .losses import ScheduleParams
from .router import STRATEGIES
from .synthdata import CorpusSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    seed: int = 0
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    vocab_size: int = 256
    max_target_len: int = 32
    num_queries: int = 16
    soft_prompt_len: int = 10
    grid_tokens: int = 16

    @property
    def max_positions(self) -> int:
        return self.soft_prompt_len + self.num_queries + self.max_target_len


@dataclass(frozen=True)
class RouterConfig:
    strategy: str = "soft_merge"
    temperature: float = 0.5
    hidden: int = 64
    inference_noise: bool = False


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-5
    router_lr: float = 5e-3
    adapter_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    divergence_factor: float = 10.0
    show_progress: bool = False


@dataclass(frozen=True)
class PhaseSchedule(ScheduleParams):
    phase1_steps: int = 3000
    phase2_steps: int = 3000

    def params(self) -> ScheduleParams:
        return ScheduleParams(
            sharpness=self.sharpness,
            midpoint=self.midpoint,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            progressive=self.progressive,
        )


@dataclass(frozen=True)
class AblationConfig:
    progressive_alignment: bool = True
    use_soft_prompt: bool = True
    soft_prompt_text_init: bool = True
    single_projector: int = -1
    use_load_balance: bool = True


@dataclass(frozen=True)
class EvalConfig:
    batch_size: int = 64
    rolling_window: int = 15
    text_modality: int = 0


SECTIONS = {
    "corpus": CorpusSpec,
    "model": ModelConfig,
    "router": RouterConfig,
    "schedule": PhaseSchedule,
    "optim": OptimConfig,
    "ablation": AblationConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class Config:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    schedule: PhaseSchedule = field(default_factory=PhaseSchedule)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, data: Dict[str, Dict[str, Any]]) -> "Config":
        sections = {}
        for name, klass in SECTIONS.items():
            values = dict(data.get(name, {}))
            if "proportions" in values:
                values["proportions"] = tuple(values["proportions"])
            sections[name] = klass(**values)
        return cls(**sections).validate()

    def with_overrides(self, overrides: Iterable[str]) -> "Config":
        config = self
        for item in overrides:
            config = config.set(*parse_override(item))
        return config

    def set(self, section: str, key: str, raw: str, lineno: Optional[int] = None) -> "Config":
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", lineno)
        current = getattr(self, section)
        types = {f.name: f.type for f in fields(current)}
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in section [{section}]", lineno)
        default = getattr(current, key)
        value = coerce(raw, default, f"{section}.{key}", lineno)
        return dataclasses.replace(self, **{section: dataclasses.replace(current, **{key: value})})

    def validate(self) -> "Config":
        try:
            self.corpus.validate()
            self.schedule.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.router.strategy not in STRATEGIES:
            raise ConfigError(f"router.strategy must be one of {', '.join(STRATEGIES)}, got {self.router.strategy!r}")
        if not self.router.temperature > 0:
            raise ConfigError("router.temperature must be > 0")
        if self.model.vocab_size != self.corpus.vocab_size:
            raise ConfigError("model.vocab_size must equal corpus.vocab_size")
        if self.model.d_model % self.model.num_heads:
            raise ConfigError("model.d_model must be divisible by model.num_heads")
        if self.corpus.d_brain % self.model.grid_tokens:
            raise ConfigError("corpus.d_brain must be divisible by model.grid_tokens")
        if self.router.hidden < self.corpus.num_modalities:
            raise ConfigError("router.hidden must be >= corpus.num_modalities")
        if self.ablation.single_projector >= self.corpus.num_modalities:
            raise ConfigError("ablation.single_projector must be < corpus.num_modalities")
        if min(self.optim.lr, self.optim.router_lr, self.optim.adapter_lr) <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.optim.batch_size < 1 or self.eval.batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if self.schedule.phase1_steps < 0 or self.schedule.phase2_steps < 0:
            raise ConfigError("phase lengths must be >= 0")
        return self

    def loss_schedule(self) -> ScheduleParams:
        """Schedule parameters with the ablation switches folded in."""
        params = self.schedule.params()
        return dataclasses.replace(
            params,
            progressive=params.progressive and self.ablation.progressive_alignment,
            lambda2=params.lambda2 if self.ablation.use_load_balance else 0.0,
        )

    def describe(self) -> List[str]:
        lines = []
        for section, values in self.to_dict().items():
            for key, value in values.items():
                lines.append(f"{section}.{key} = {value}")
        return lines


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(raw: str, default: Any, label: str, lineno: Optional[int] = None) -> Any:
    """Convert a raw string to the type of the field's default."""
    raw = raw.strip()
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
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {label}", lineno) from None


def parse_override(item: str) -> Tuple[str, str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, raw = item.split("=", 1)
    if dotted.count(".") != 1:
        raise ConfigError(f"override key {dotted!r} must look like section.key")
    section, key = (part.strip() for part in dotted.split("."))
    return section, key, raw


def _key_lines(text: str) -> Dict[Tuple[str, str], int]:
    """Line numbers of every key, so validation errors can point at the file."""
    positions = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", stripped)
        if m:
            section = m.group(1).strip()
        elif section and stripped and stripped[0] not in "#;":
            key = re.split(r"[=:]", stripped, maxsplit=1)[0].strip().lower()
            positions[(section, key)] = lineno
    return positions


def parse_config(text: str, source: str = "<config>") -> Config:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"{source}: key outside of any section", e.lineno) from e
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if getattr(e, "errors", None) else None
        raise ConfigError(f"{source}: could not parse config", lineno) from e
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as e:
        raise ConfigError(f"{source}: {e.message}", e.lineno) from e

    lines = _key_lines(text)
    config = Config()
    for section in parser.sections():
        for key, raw in parser.items(section):
            config = config.set(section, key, raw, lines.get((section, key)))
    return config.validate()


def load_config(path, overrides: Iterable[str] = ()) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    config = parse_config(path.read_text(encoding="utf-8"), source=str(path))
    return config.with_overrides(overrides).validate()


def render_config(config: Config) -> str:
    """Render a config back to INI text (used to write the default config file)."""
    lines = []
    for section, values in config.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if isinstance(value, (list, tuple)):
                value = ", ".join(repr(float(v)) for v in value)
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
