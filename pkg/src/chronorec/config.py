"""Run configuration: one nested schema, JSON files, dotted overrides, env overrides.

External key syntax is ``section.field`` (for example ``loss.lambda`` or
``diffusion.T``). Every key has a default; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

ENV_PREFIX = "CHRONOREC_"

# Python-keyword clashes: external name -> dataclass field name.
_FIELD_ALIASES = {"lambda": "lambda_"}
_FIELD_ALIASES_INV = {v: k for k, v in _FIELD_ALIASES.items()}


class ConfigError(ValueError):
    """Bad key, bad value, or malformed config file."""


@dataclass
class DataConfig:
    input: str = ""
    format: str = "csv"  # csv | tsv
    header: bool = False
    user_col: int = 0
    item_col: int = 1
    time_col: int = 2
    strict: bool = False
    min_count: int = 5
    max_len: int = 10
    split: str = "loo"  # loo | temporal
    seed: int = 0


@dataclass
class TimeEncoderConfig:
    kind: str = "sinusoidal"  # sinusoidal | gaussian | rff | position
    freq: float = 10000.0
    sigma: float = 0.05
    seed: int = 0  # draw seed for the frozen rff frequencies


@dataclass
class ToiConfig:
    enabled: bool = True
    gamma: float = 0.5
    hidden_mult: int = 2


@dataclass
class DiffusionConfig:
    T: int = 2000
    infer_steps: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    w: float = 2.0
    p_uncond: float = 0.1
    seed: int = 0


@dataclass
class LossConfig:
    lambda_: float = 0.4  # external key: loss.lambda
    eta: float = 0.5
    k: int = 4
    sign_mode: str = "paper-intent"  # paper-intent | verbatim


@dataclass
class ModelConfig:
    d: int = 32
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 4
    dropout: float = 0.0
    denoiser_hidden_mult: int = 2
    ranking: str = "dot"  # dot | cosine
    init_seed: int = 0
    dtype: str = "float64"  # float64 | float32


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size_train: int = 256
    batch_size_eval: int = 32
    patience: int = 10
    max_epochs: int = 200
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    seed: int = 0
    val_metric: str = "ndcg@10"


@dataclass
class EvalConfig:
    ks: tuple = (5, 10)
    exclude_history: bool = False
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    time_encoder: TimeEncoderConfig = field(default_factory=TimeEncoderConfig)
    toi: ToiConfig = field(default_factory=ToiConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.data.format not in ("csv", "tsv"):
            raise ConfigError(f"data.format must be csv or tsv, got {self.data.format!r}")
        if self.data.split not in ("loo", "temporal"):
            raise ConfigError(f"data.split must be loo or temporal, got {self.data.split!r}")
        if self.data.min_count < 1:
            raise ConfigError("data.min_count must be >= 1")
        if self.data.max_len < 2:
            raise ConfigError("data.max_len must be >= 2")
        if self.time_encoder.kind not in ("sinusoidal", "gaussian", "rff", "position"):
            raise ConfigError(f"unknown time_encoder.kind {self.time_encoder.kind!r}")
        if self.time_encoder.sigma <= 0:
            raise ConfigError("time_encoder.sigma must be > 0")
        if self.time_encoder.freq <= 0:
            raise ConfigError("time_encoder.freq must be > 0")
        if self.time_encoder.kind in ("sinusoidal", "rff") and self.model.d % 2 != 0:
            raise ConfigError("model.d must be even for sinusoidal and rff encoders")
        if self.time_encoder.kind == "position" and self.toi.enabled:
            raise ConfigError(
                "toi.enabled requires real timestamps; disable it for the position encoder"
            )
        if not 0.0 <= self.toi.gamma <= 1.0:
            raise ConfigError("toi.gamma must lie in [0, 1]")
        if not 0.0 <= self.loss.lambda_ <= 1.0:
            raise ConfigError("loss.lambda must lie in [0, 1]")
        if not 0.0 <= self.loss.eta <= 1.0:
            raise ConfigError("loss.eta must lie in [0, 1]")
        if self.loss.k < 1:
            raise ConfigError("loss.k must be >= 1")
        if self.loss.sign_mode not in ("paper-intent", "verbatim"):
            raise ConfigError(f"unknown loss.sign_mode {self.loss.sign_mode!r}")
        if self.diffusion.T < 1:
            raise ConfigError("diffusion.T must be >= 1")
        if not 0 < self.diffusion.beta_start <= self.diffusion.beta_end < 1:
            raise ConfigError("need 0 < diffusion.beta_start <= diffusion.beta_end < 1")
        if self.diffusion.infer_steps < 1:
            raise ConfigError("diffusion.infer_steps must be >= 1")
        if self.diffusion.w < 0:
            raise ConfigError("diffusion.w must be >= 0")
        if not 0.0 <= self.diffusion.p_uncond <= 1.0:
            raise ConfigError("diffusion.p_uncond must lie in [0, 1]")
        if self.model.d % self.model.heads != 0:
            raise ConfigError("model.heads must divide model.d")
        if self.model.dtype not in ("float64", "float32"):
            raise ConfigError(f"model.dtype must be float64 or float32, got {self.model.dtype!r}")
        if self.model.ranking not in ("dot", "cosine"):
            raise ConfigError(f"model.ranking must be dot or cosine, got {self.model.ranking!r}")
        for name in ("learning_rate", "batch_size_train", "batch_size_eval", "patience", "max_epochs"):
            if getattr(self.train, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.train.weight_decay < 0 or self.train.grad_clip < 0:
            raise ConfigError("train.weight_decay and train.grad_clip must be >= 0")
        if not self.eval.ks or any(k < 1 for k in self.eval.ks):
            raise ConfigError("eval.ks must be positive cutoffs")
        return self


def _coerce(value: Any, ftype: Any, key: str) -> Any:
    """Coerce a raw (string or JSON) value to a dataclass field type."""
    if ftype is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
        raise ConfigError(f"{key}: cannot interpret {value!r} as bool")
    if ftype is int:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected int, got bool")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            return int(value.strip())
        raise ConfigError(f"{key}: cannot interpret {value!r} as int")
    if ftype is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            return float(value.strip())
        raise ConfigError(f"{key}: cannot interpret {value!r} as float")
    if ftype is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected string, got {value!r}")
    if ftype is tuple:
        if isinstance(value, str):
            parts = [p for p in value.replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
        if isinstance(value, (list, tuple)):
            return tuple(int(v) for v in value)
        raise ConfigError(f"{key}: cannot interpret {value!r} as tuple of ints")
    raise ConfigError(f"{key}: unsupported field type {ftype}")


def _section_fields(section: Any) -> dict[str, Any]:
    return {f.name: f for f in fields(section)}


def config_keys(cfg: RunConfig | None = None) -> list[str]:
    """All external dotted keys, in schema order."""
    cfg = cfg or RunConfig()
    keys = []
    for sec_f in fields(cfg):
        section = getattr(cfg, sec_f.name)
        for f in fields(section):
            keys.append(f"{sec_f.name}.{_FIELD_ALIASES_INV.get(f.name, f.name)}")
    return keys


def set_key(cfg: RunConfig, key: str, value: Any) -> None:
    """Set one external dotted key in place, coercing the value."""
    if "." not in key:
        raise ConfigError(f"key {key!r} must be section.field")
    sec_name, _, field_name = key.partition(".")
    if not hasattr(cfg, sec_name) or not dataclasses.is_dataclass(getattr(cfg, sec_name)):
        raise ConfigError(f"unknown config section {sec_name!r}")
    section = getattr(cfg, sec_name)
    internal = _FIELD_ALIASES.get(field_name, field_name)
    sec_fields = _section_fields(section)
    if internal not in sec_fields:
        raise ConfigError(f"unknown config key {key!r}")
    ftype = sec_fields[internal].type
    if isinstance(ftype, str):  # from __future__ annotations
        ftype = {"str": str, "int": int, "float": float, "bool": bool, "tuple": tuple}[ftype]
    setattr(section, internal, _coerce(value, ftype, key))


def get_key(cfg: RunConfig, key: str) -> Any:
    sec_name, _, field_name = key.partition(".")
    internal = _FIELD_ALIASES.get(field_name, field_name)
    return getattr(getattr(cfg, sec_name), internal)


def to_dict(cfg: RunConfig) -> dict:
    """Nested plain-dict form using external field names."""
    out: dict[str, dict] = {}
    for sec_f in fields(cfg):
        section = getattr(cfg, sec_f.name)
        sec_out = {}
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = list(value)
            sec_out[_FIELD_ALIASES_INV.get(f.name, f.name)] = value
        out[sec_f.name] = sec_out
    return out


def from_dict(payload: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from a nested mapping; unknown sections or keys raise."""
    cfg = base or RunConfig()
    if not isinstance(payload, Mapping):
        raise ConfigError("config root must be a mapping of sections")
    for sec_name, sec_payload in payload.items():
        if not hasattr(cfg, str(sec_name)) or not dataclasses.is_dataclass(
            getattr(cfg, str(sec_name), None)
        ):
            raise ConfigError(f"unknown config section {sec_name!r}")
        if not isinstance(sec_payload, Mapping):
            raise ConfigError(f"section {sec_name!r} must be a mapping")
        for field_name, value in sec_payload.items():
            set_key(cfg, f"{sec_name}.{field_name}", value)
    return cfg


def load_file(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    return from_dict(payload, base)


def apply_env(cfg: RunConfig, environ: Mapping[str, str] | None = None) -> RunConfig:
    """Apply CHRONOREC_SECTION__FIELD=value overrides (double underscore = dot)."""
    environ = os.environ if environ is None else environ
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "__" not in rest:
            continue
        sec, _, fieldname = rest.partition("__")
        key = f"{sec.lower()}.{fieldname.lower()}"
        # diffusion.T is the one capitalized field
        if key == "diffusion.t":
            key = "diffusion.T"
        set_key(cfg, key, value)
    return cfg


def resolve(
    config_file: str | None = None,
    overrides: list[tuple[str, str]] | None = None,
    environ: Mapping[str, str] | None = None,
) -> RunConfig:
    """File < env < CLI flags, last writer wins; validated at the end."""
    cfg = RunConfig()
    if config_file:
        cfg = load_file(config_file, cfg)
    apply_env(cfg, environ)
    for key, value in overrides or []:
        set_key(cfg, key, value)
    return cfg.validate()


def save_resolved(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
