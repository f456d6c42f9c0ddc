"""Model and run configuration.

Run configs are TOML files with ``[model]``, ``[train]``, ``[scfvr]``,
``[rds]`` and ``[paths]`` tables.  Every key is validated up front and all
problems are reported together.  Environment variables named
``LATENTVR_<SECTION>__<KEY>`` override file values.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from typing import Any

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

ENV_PREFIX = "LATENTVR_"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    vocab_size: int = 96
    grid: int = 10
    image_side: int = 80
    channels: int = 3
    rank: int = 8
    latent_steps: int = 4
    replay_k: int = 32
    window: int = 3
    max_depth: int = 1
    retention: str = "fixed"
    alpha: int = 32
    alpha_start: int = 64
    alpha_end: int = 16
    max_len: int = 384
    ffn_mult: int = 4
    restrict_refine: bool = True
    cumulative_density: bool = False
    dtype: str = "float64"

    @property
    def n_visual(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def cell(self) -> int:
        return self.image_side // self.grid

    def problems(self) -> list[str]:
        out = []
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "grid", "image_side",
                     "channels", "rank", "replay_k", "window", "alpha", "alpha_start",
                     "alpha_end", "max_len", "ffn_mult"):
            if getattr(self, name) < 1:
                out.append(f"model.{name} must be >= 1")
        if self.latent_steps < 0:
            out.append("model.latent_steps must be >= 0")
        if self.max_depth < 0:
            out.append("model.max_depth must be >= 0")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            out.append(f"model.d_model ({self.d_model}) must be divisible by "
                       f"n_heads ({self.n_heads})")
        if self.grid >= 1 and self.image_side % self.grid:
            out.append(f"model.image_side ({self.image_side}) must be divisible by "
                       f"grid ({self.grid})")
        if self.grid >= 1 and not 1 <= self.replay_k <= self.n_visual:
            out.append(f"scfvr.replay_k must lie in [1, {self.n_visual}]")
        if self.grid >= 1 and not 1 <= self.window <= self.grid:
            out.append(f"scfvr.window must lie in [1, {self.grid}]")
        if self.retention not in ("fixed", "cosine"):
            out.append("rds.retention must be 'fixed' or 'cosine'")
        if self.dtype not in ("float32", "float64"):
            out.append("model.dtype must be 'float32' or 'float64'")
        return out

    def validate(self) -> "ModelConfig":
        probs = self.problems()
        if probs:
            raise ConfigError(probs)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainConfig:
    epochs: int = 16
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 8
    recon_weight: float = 1.0
    seed: int = 0
    val_size: int = 64
    early_epochs: int = 3
    probe_size: int = 4
    clip_norm: float = 0.0
    mode: str = "latent"
    freeze_base_after_stage0: bool = True
    diagnostics: bool = True

    def problems(self) -> list[str]:
        out = []
        if self.epochs < 1:
            out.append("train.epochs must be >= 1")
        if self.lr <= 0:
            out.append("train.lr must be > 0")
        if not 0 <= self.beta1 < 1:
            out.append("train.beta1 must lie in [0, 1)")
        if not 0 <= self.beta2 < 1:
            out.append("train.beta2 must lie in [0, 1)")
        if self.batch < 1:
            out.append("train.batch must be >= 1")
        if self.recon_weight < 0:
            out.append("train.recon_weight must be >= 0")
        if self.val_size < 0:
            out.append("train.val_size must be >= 0")
        if self.early_epochs < 2:
            out.append("train.early_epochs must be >= 2")
        if self.mode not in ("latent", "nocot"):
            out.append("train.mode must be 'latent' or 'nocot'")
        if self.clip_norm < 0:
            out.append("train.clip_norm must be >= 0")
        return out


# which section each ModelConfig field is read from
_MODEL_SECTIONS = {
    "scfvr": ("replay_k", "window", "cumulative_density"),
    "rds": ("max_depth", "retention", "alpha", "alpha_start", "alpha_end", "restrict_refine"),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    def to_toml(self) -> str:
        m = self.model.to_dict()
        sections: dict[str, dict] = {"model": {}, "train": dataclasses.asdict(self.train),
                                     "scfvr": {}, "rds": {}}
        for k, v in m.items():
            sec = next((s for s, keys in _MODEL_SECTIONS.items() if k in keys), "model")
            sections[sec][k] = v
        if self.paths:
            sections["paths"] = dict(self.paths)
        lines = []
        for sec, vals in sections.items():
            lines.append(f"[{sec}]")
            for k, v in vals.items():
                lines.append(f"{k} = {_toml_value(v)}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def _coerce(value: Any, target_type, where: str, problems: list[str]):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
    elif target_type is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif target_type is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif target_type is str:
        if isinstance(value, str):
            return value
    problems.append(f"{where}: expected {target_type.__name__}, got {value!r}")
    return None


def _field_types(cls) -> dict:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}


def parse_run_config(raw: dict, env: dict | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from a parsed TOML mapping."""
    env = os.environ if env is None else env
    raw = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, _, name = key[len(ENV_PREFIX):].lower().partition("__")
        raw.setdefault(section, {})[name] = value

    problems: list[str] = []
    model_types = _field_types(ModelConfig)
    train_types = _field_types(TrainConfig)
    model_kw: dict = {}
    train_kw: dict = {}
    paths: dict = {}
    allowed = {"model", "train", "scfvr", "rds", "paths"}
    for section, table in raw.items():
        if section not in allowed:
            problems.append(f"unknown section [{section}]")
            continue
        if not isinstance(table, dict):
            problems.append(f"[{section}] must be a table")
            continue
        for key, value in table.items():
            where = f"{section}.{key}"
            if section == "paths":
                if isinstance(value, str):
                    paths[key] = value
                else:
                    problems.append(f"{where}: expected str, got {value!r}")
            elif section == "train":
                if key not in train_types:
                    problems.append(f"unknown key {where}")
                    continue
                v = _coerce(value, train_types[key], where, problems)
                if v is not None:
                    train_kw[key] = v
            else:
                expected = _MODEL_SECTIONS.get(section)
                owner = next((s for s, ks in _MODEL_SECTIONS.items() if key in ks), "model")
                if key not in model_types or (expected is None and owner != "model") \
                        or (expected is not None and key not in expected):
                    problems.append(f"unknown key {where}")
                    continue
                v = _coerce(value, model_types[key], where, problems)
                if v is not None:
                    model_kw[key] = v
    model = ModelConfig(**model_kw)
    train = TrainConfig(**train_kw)
    problems.extend(model.problems())
    problems.extend(train.problems())
    if problems:
        raise ConfigError(problems)
    return RunConfig(model=model, train=train, paths=paths)


def load_run_config(path: str, env: dict | None = None) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"{path}: {exc}"]) from exc
    return parse_run_config(raw, env)
