"""Run configuration and its ``key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig, embed_prompt
from .sampler import SamplerConfig

_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig)]
_SAMPLER_KEYS = [f.name for f in dataclasses.fields(SamplerConfig)]
_ABLATION_NAMES = {"pta": "pta_enabled", "merge": "merge_enabled", "masking": "masking_enabled"}

DEFAULT_IDENTITY_PROMPT = "a quiet library | an old woman with a cane | reading"
DEFAULT_FRAME_PROMPTS = (
    "a quiet library | an old woman with a cane | reading",
    "a quiet library | an old woman with a cane | walking between shelves",
    "a quiet library | an old woman with a cane | sitting by the window",
)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    identity_prompt: str = DEFAULT_IDENTITY_PROMPT
    frame_prompts: list = field(default_factory=lambda: list(DEFAULT_FRAME_PROMPTS))
    seed: int = 1
    out: str = "out"

    def validate(self) -> "RunConfig":
        embed_prompt(self.identity_prompt, self.model)
        for p in self.frame_prompts:
            embed_prompt(p, self.model)
        return self

    def replace(self, **changes) -> "RunConfig":
        model = {k: v for k, v in changes.items() if k in _MODEL_KEYS}
        sampler = {k: v for k, v in changes.items() if k in _SAMPLER_KEYS}
        rest = {k: v for k, v in changes.items() if k not in model and k not in sampler}
        return dataclasses.replace(
            self,
            model=_rebuild(ModelConfig, self.model, model),
            sampler=_rebuild(SamplerConfig, self.sampler, sampler),
            **rest,
        )


def _rebuild(cls, current, changes):
    if not changes:
        return current
    try:
        return dataclasses.replace(current, **changes)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _parse_bool(key, text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _coerce(key: str, text: str, kind):
    if kind is bool:
        return _parse_bool(key, text)
    try:
        return kind(text.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {text!r}") from None


def _field_type(cls, name):
    default = next(f.default for f in dataclasses.fields(cls) if f.name == name)
    return type(default)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; ``frame_prompt`` repeats."""
    values, frames = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "frame_prompt":
            frames.append(value)
            continue
        if key in _MODEL_KEYS:
            values[key] = _coerce(key, value, _field_type(ModelConfig, key))
        elif key in _SAMPLER_KEYS:
            values[key] = _coerce(key, value, _field_type(SamplerConfig, key))
        elif key == "seed":
            values[key] = _coerce(key, value, int)
        elif key in ("identity_prompt", "out"):
            values[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    cfg = RunConfig().replace(**values)
    if frames:
        cfg.frame_prompts = frames
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Normalized text form; ``parse_config(format_config(c))`` reproduces ``c``."""
    lines = ["# model"]
    for key in _MODEL_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg.model, key))}")
    lines.append("# sampler")
    for key in _SAMPLER_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg.sampler, key))}")
    lines.append("# run")
    lines.append(f"seed = {cfg.seed}")
    lines.append(f"out = {cfg.out}")
    lines.append(f"identity_prompt = {cfg.identity_prompt}")
    for p in cfg.frame_prompts:
        lines.append(f"frame_prompt = {p}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def ablation_key(name: str) -> str:
    try:
        return _ABLATION_NAMES[name]
    except KeyError:
        raise ConfigError(f"--disable: unknown module {name!r}") from None
