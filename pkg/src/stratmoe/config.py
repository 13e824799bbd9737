"""Run configuration as flat ``key = value`` text with ``#`` comments."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .model import ConfigError, ModelConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 2000
    warmup: int = 160  # 8% of steps
    peak_lr: float = 2e-3
    batch_tokens: int = 256
    clip_norm: float = 0.0  # 0 disables clipping
    data: str = "data"
    out: str = "run"
    checkpoint_every: int = 500

    @property
    def alpha(self) -> float:
        return self.model.alpha

    @property
    def seed(self) -> int:
        return self.model.seed

    def validate(self) -> None:
        self.model.validate()
        if self.steps < 1 or self.warmup < 1 or self.batch_tokens < 1:
            raise ConfigError("steps, warmup and batch_tokens must be positive")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")


def _field_types(cls) -> dict[str, str]:
    return {f.name: f.type for f in fields(cls)}


_MODEL_TYPES = _field_types(ModelConfig)
_RUN_TYPES = {k: v for k, v in _field_types(RunConfig).items() if k != "model"}


def _convert(key: str, text: str, type_name: str):
    try:
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        if type_name == "float | None":
            return None if text.lower() == "none" else float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type_name}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse config text; keys not given keep the values from ``base``."""
    cfg = base or RunConfig()
    model_kw, run_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _MODEL_TYPES:
            model_kw[key] = _convert(key, value, _MODEL_TYPES[key])
        elif key in _RUN_TYPES:
            run_kw[key] = _convert(key, value, _RUN_TYPES[key])
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return replace(cfg, model=replace(cfg.model, **model_kw), **run_kw)


def serialize_config(cfg: RunConfig) -> str:
    lines = ["# model"]
    lines += [f"{k} = {_format(getattr(cfg.model, k))}" for k in _MODEL_TYPES]
    lines.append("# training")
    lines += [f"{k} = {_format(getattr(cfg, k))}" for k in _RUN_TYPES]
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply ``key=value`` strings, as given with ``--set`` on the command line."""
    return parse_config("\n".join(pairs), cfg)
