"""Synthesis, likelihood evaluation and tolerance benchmarking on a trained model."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .flow import CNFVocoder, TraceMode, TraceSettings
from .odeint import SolverConfig

BENCH_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)


class ModelMismatch(ValueError):
    pass


def _dtype(model: CNFVocoder) -> torch.dtype:
    return model.upsampler.conv.weight.dtype


def pad_mel(model: CNFVocoder, mel: np.ndarray) -> tuple[torch.Tensor, int]:
    """Edge-pad frames so frames*hop is a valid length; returns (mel [1, M, T'], T)."""
    cfg = model.cfg
    if mel.ndim != 2 or mel.shape[0] != cfg.n_mels:
        raise ModelMismatch(f"mel has {mel.shape[0] if mel.ndim == 2 else mel.shape} bands, "
                            f"model expects {cfg.n_mels}")
    frames = mel.shape[1]
    step = cfg.length_multiple // math.gcd(cfg.length_multiple, cfg.hop)
    padded = -(-frames // step) * step
    if padded != frames:
        mel = np.pad(mel, ((0, 0), (0, padded - frames)), mode="edge")
    return torch.as_tensor(mel, dtype=_dtype(model)).unsqueeze(0), frames


def fixed_latents(model: CNFVocoder, mel: torch.Tensor, seed: int, temperature: float = 1.0):
    g = torch.Generator().manual_seed(seed)
    length = mel.shape[2] * model.cfg.hop
    return [temperature * torch.randn(s, generator=g, dtype=_dtype(model))
            for s in model.latent_shapes(mel.shape[0], length)]


@dataclass
class SynthReport:
    samples: int
    seconds: float
    samples_per_sec: float
    nfe: int
    tolerance: float


@torch.no_grad()
def synthesize(model: CNFVocoder, mel: np.ndarray, tolerance: float = 1e-3, latent_seed: int = 0,
               temperature: float = 1.0) -> tuple[np.ndarray, SynthReport]:
    """Waveform of length frames*hop for a [n_mels, frames] log-mel.

    The timer covers the ODE solves and layer inverses only.
    """
    model.eval()
    mel_t, frames = pad_mel(model, mel)
    latents = fixed_latents(model, mel_t, latent_seed, temperature)
    solver = SolverConfig.adaptive(tolerance)
    t0 = time.perf_counter()
    res = model.sample(mel_t, solver, latents=latents)
    dt = time.perf_counter() - t0
    n = frames * model.cfg.hop
    audio = res.audio[0, 0, :n].cpu().numpy().astype(np.float64)
    return audio, SynthReport(n, dt, n / dt, res.nfe, tolerance)


@dataclass
class BenchRow:
    tolerance: float
    nfe: int
    samples_per_sec: float


@torch.no_grad()
def bench_tolerance(model: CNFVocoder, mel: np.ndarray, grid=BENCH_GRID, latent_seed: int = 0,
                    repeats: int = 3) -> list[BenchRow]:
    """Sampling cost across solver tolerances with one latent draw for the whole sweep.

    Speed is the best of ``repeats`` timed runs. Repeats sweep the whole
    grid round-robin, so a burst of machine load hits every tolerance
    rather than one.
    """
    model.eval()
    mel_t, frames = pad_mel(model, mel)
    latents = fixed_latents(model, mel_t, latent_seed)
    n = mel_t.shape[2] * model.cfg.hop
    model.sample(mel_t, SolverConfig.adaptive(max(grid)), latents=latents)  # warm-up
    best = [math.inf] * len(grid)
    nfe = [0] * len(grid)
    for _ in range(repeats):
        for i, tol in enumerate(grid):
            t0 = time.perf_counter()
            res = model.sample(mel_t, SolverConfig.adaptive(tol), latents=latents)
            best[i] = min(best[i], time.perf_counter() - t0)
            nfe[i] = res.nfe
    return [BenchRow(tol, k, n / b) for tol, k, b in zip(grid, nfe, best)]


def write_bench_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["tolerance", "nfe", "samples_per_sec"])
        for r in rows:
            w.writerow([f"{r.tolerance:g}", r.nfe, f"{r.samples_per_sec:.6g}"])


@dataclass
class EvalReport:
    mode: str
    n_clips: int
    cll_mean: float
    cll_stderr: float
    per_clip: list[float]


@torch.no_grad()
def evaluate_cll(model: CNFVocoder, clips: list[np.ndarray], mels: list[np.ndarray],
                 mode: str = "hutchinson", tolerance: float = 1e-5, exact_cap: int = 1024,
                 seed: int = 0, probes: int = 1) -> EvalReport:
    """Mean CLL in nats per sample over clips, with its standard error."""
    if not clips:
        raise ValueError("empty dataset")
    model.eval()
    mode = TraceMode(mode)
    g = torch.Generator().manual_seed(seed)
    trace = TraceSettings(mode, probes, model.cfg.noise_dist, exact_cap, g)
    solver = SolverConfig.adaptive(tolerance)
    dtype = _dtype(model)
    m = model.cfg.length_multiple
    hop = model.cfg.hop
    unit = m * hop // math.gcd(m, hop)
    vals = []
    for clip, mel in zip(clips, mels):
        n = len(clip) // unit * unit
        if n == 0:
            raise ValueError(f"clip of {len(clip)} samples is shorter than one valid length ({unit})")
        x = torch.as_tensor(clip[:n], dtype=dtype).view(1, 1, n)
        c = torch.as_tensor(mel[:, : n // hop], dtype=dtype).unsqueeze(0)
        vals.append(float(model.infer(x, c, solver, trace).cll[0]))
    arr = np.asarray(vals)
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else float("nan")
    return EvalReport(mode.value, len(arr), float(arr.mean()), se, vals)


def list_wavs(path) -> list[Path]:
    return sorted(Path(path).glob("*.wav"))
