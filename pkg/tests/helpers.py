"""Shared toy configurations and independent numpy oracles for the test suite."""
from __future__ import annotations

import math

import numpy as np
import torch

from cnf_vocoder.config import RunConfig
from cnf_vocoder.flow import ActNorm, CNFVocoder, ModelConfig, MovingBatchNorm
from cnf_vocoder.dynamics import DynamicsConfig

TOY = {
    "model.n_blocks": 2, "model.q_init": 2, "model.factor_out_after_block": 1,
    "dynamics.n_layers": 3, "dynamics.residual_channels": 16, "dynamics.skip_channels": 16,
    "audio.n_mels": 16, "audio.n_fft": 256, "audio.win_length": 256, "audio.hop": 64,
    "audio.fmax": 4000, "train.crop_len": 1024, "train.clip_len": 4096, "train.n_clips": 4,
    "train.dtype": "float64", "train.seed": 7, "train.lr": 3e-3, "train.log_every": 10,
}


def toy_config(**overrides) -> RunConfig:
    values = dict(TOY)
    values.update({k.replace("__", "."): v for k, v in overrides.items()})
    return RunConfig().with_overrides(values)


def micro_config(**kw) -> ModelConfig:
    """Two blocks on length-8 waveforms: per-block state sizes 4x2 and 4x1."""
    dyn = DynamicsConfig(n_layers=2, residual_channels=8, skip_channels=8, dilation_base=2)
    base = dict(n_blocks=2, q=2, q_init=2, factor_out_after_block=1, n_mels=4, hop=4,
                de_hidden=8, dynamics=dyn)
    base.update(kw)
    return ModelConfig(**base)


def randomize_(model: CNFVocoder, seed: int, scale: float = 0.3) -> CNFVocoder:
    """Overwrite every parameter (zero-initialised heads included) with noise,
    and mark actnorms initialised with random positive scales."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(".s"):
                p.copy_(torch.exp(0.2 * torch.randn(p.shape, generator=g, dtype=p.dtype)))
            else:
                p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
        for m in model.modules():
            if isinstance(m, ActNorm):
                m.initialized.fill_(True)
            if isinstance(m, MovingBatchNorm):
                m.running_mean.copy_(0.1 * torch.randn(m.running_mean.shape, generator=g, dtype=m.running_mean.dtype))
                m.running_std.copy_(torch.exp(0.2 * torch.randn(m.running_std.shape, generator=g, dtype=m.running_std.dtype)))
                m.populated.fill_(True)
    return model


# ---------------------------------------------------------------- numpy oracles

def np_squeeze(x: np.ndarray, q: int) -> np.ndarray:
    """Element-by-element squeeze: out[b, c*q + r, l] = x[b, c, l*q + r]."""
    b, c, length = x.shape
    out = np.empty((b, c * q, length // q), dtype=x.dtype)
    for ci in range(c):
        for r in range(q):
            out[:, ci * q + r, :] = x[:, ci, r::q]
    return out


def np_std_normal_logp(z: np.ndarray) -> np.ndarray:
    return (-0.5 * z ** 2 - 0.5 * math.log(2 * math.pi)).reshape(z.shape[0], -1).sum(1)


def identity_init_loglik(x: np.ndarray, n_blocks: int, q: int, q_init: int, factor_after: int,
                         floor: float = 1e-6) -> np.ndarray:
    """log p(x | c) in nats per waveform for a model whose vector fields and
    factor-out prior are zero and whose actnorms are initialised on ``x``.

    Every layer is then affine, so the density is a product of Gaussians
    times the actnorm Jacobian, with no ODE solve.
    """
    z = np_squeeze(x, q_init)
    logdet = np.zeros(x.shape[0])
    logp = np.zeros(x.shape[0])
    for i in range(n_blocks):
        z = np_squeeze(z, q)
        mean = z.mean(axis=(0, 2), keepdims=True)
        std = np.maximum(np.sqrt(((z - mean) ** 2).mean(axis=(0, 2), keepdims=True)), floor)
        z = (z - mean) / std
        logdet += z.shape[2] * np.sum(-np.log(std))
        if i + 1 == factor_after:
            half = z.shape[1] // 2
            logp += np_std_normal_logp(z[:, half:])
            z = z[:, :half]
    return logp + np_std_normal_logp(z) + logdet


def fd_jacobian(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference Jacobian of a flat map R^n -> R^m."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))).ravel() / (2 * h))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE: dict[int, str] = {}


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line, then assert."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line
