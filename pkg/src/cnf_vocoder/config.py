"""Run configuration: flat ``section.key = value`` files and seed derivation.

Sections are ``model``, ``dynamics``, ``audio``, ``train`` and ``eval``.
Lines starting with ``#`` are comments. Values are Python literals
(numbers, booleans, quoted or bare strings).
"""
from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .audio import AudioConfig
from .dynamics import DynamicsConfig
from .flow import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int | None = None
    lr: float = 1e-3
    grad_clip: float = 5.0
    batch_size: int = 2
    steps: int = 200
    crop_len: int = 4096
    n_clips: int = 8
    clip_len: int = 16384
    data: str = ""  # directory of WAVs; empty means the synthetic corpus
    log_every: int = 10
    ckpt_every: int = 50
    dtype: str = "float32"
    method: str = "dopri5"
    n_steps: int = 8  # rk4 only
    max_evals: int = 100_000
    threads: int = 1


@dataclass(frozen=True)
class EvalConfig:
    tolerance: float = 1e-3
    exact_cap: int = 1024
    latent_seed: int = 0
    temperature: float = 1.0


# model keys that are owned by the audio section
_AUDIO_OWNED = {"n_mels", "hop"}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_config(self) -> ModelConfig:
        return replace(self.model, n_mels=self.audio.n_mels, hop=self.audio.hop)

    def flat(self) -> dict[str, object]:
        out = {}
        for section in ("model", "dynamics", "audio", "train", "eval"):
            obj = self.model.dynamics if section == "dynamics" else getattr(self, section)
            for f in fields(obj):
                if section == "model" and (f.name == "dynamics" or f.name in _AUDIO_OWNED):
                    continue
                if section == "dynamics" and f.name in ("in_channels", "cond_channels"):
                    continue
                v = getattr(obj, f.name)
                out[f"{section}.{f.name}"] = getattr(v, "value", v)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.flat().items())

    def hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:12]

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        known = self.flat()
        buckets: dict[str, dict] = {s: {} for s in ("model", "dynamics", "audio", "train", "eval")}
        for key, raw in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            section, name = key.split(".", 1)
            buckets[section][name] = _coerce(raw, known[key], key)
        try:
            dyn = replace(self.model.dynamics, **buckets["dynamics"])
            model = replace(self.model, dynamics=dyn, **buckets["model"])
            return RunConfig(model, replace(self.audio, **buckets["audio"]),
                             replace(self.train, **buckets["train"]), replace(self.eval, **buckets["eval"]))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def validate(self) -> None:
        try:
            self.audio.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        m = self.model_config()
        if self.train.crop_len % m.length_multiple or self.train.crop_len % self.audio.hop:
            raise ConfigError(f"train.crop_len {self.train.crop_len} must be a multiple of "
                              f"{m.length_multiple} and of audio.hop {self.audio.hop}")
        if self.train.crop_len > self.train.clip_len:
            raise ConfigError("train.crop_len exceeds train.clip_len")
        if self.audio.hop > 1 and self.audio.hop % 2:
            raise ConfigError("audio.hop must be even for the transposed-convolution upsampler")
        if self.train.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")


def _coerce(raw, current, key):
    if raw is None:
        return None
    if not isinstance(raw, str):
        value = raw
    else:
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            value = raw
    if isinstance(current, bool):
        if isinstance(value, str):
            value = value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return value
    if isinstance(current, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
        return float(value)
    if current is None and isinstance(value, (int, float, str)):
        return value
    return str(value)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    values = {}
    if path:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    values.update(overrides or {})
    return cfg.with_overrides(values)


def config_keys() -> list[str]:
    return list(RunConfig().flat())


def derive_seed(root: int, component: str) -> int:
    """Per-component seed: first 8 bytes of sha256("<root>:<component>")."""
    digest = hashlib.sha256(f"{root}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)
