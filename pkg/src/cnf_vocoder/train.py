"""Seeded maximum-likelihood training loop with CSV metrics and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import mel_spectrogram, synth_dataset, wav_read
from .checkpoint import save_checkpoint
from .config import ConfigError, RunConfig, derive_seed
from .flow import CNFVocoder
from .odeint import Method, SolverConfig

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step", "wallclock", "loss", "nfe_forward_mean", "tolerance",
                 "samples_per_sec", "config_hash"]


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class MetricsRow:
    step: int
    wallclock: float
    loss: float
    nfe_forward_mean: float
    tolerance: float
    samples_per_sec: float | str = ""
    config_hash: str = ""


class MetricsWriter:
    def __init__(self, path: Path | None):
        self.path = path
        self.rows: list[MetricsRow] = []
        if path is not None:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)

    def write(self, row: MetricsRow) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                d = asdict(row)
                csv.writer(fh).writerow([_fmt(d[k]) for k in METRIC_FIELDS])


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


def torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


def training_solver(cfg: RunConfig) -> SolverConfig:
    t = cfg.train
    if Method(t.method) is Method.RK4_FIXED:
        return SolverConfig(Method.RK4_FIXED, n_steps=t.n_steps, max_evals=t.max_evals)
    tol = cfg.model.train_tolerance
    return SolverConfig(Method.DOPRI5_ADAPTIVE, tol, tol, max_evals=t.max_evals)


def load_clips(cfg: RunConfig) -> list[np.ndarray]:
    t = cfg.train
    if t.data:
        paths = sorted(Path(t.data).glob("*.wav"))
        if not paths:
            raise ConfigError(f"train.data {t.data!r} holds no .wav files")
        clips = []
        for p in paths:
            w = wav_read(p)
            if w.sample_rate != cfg.audio.sample_rate:
                raise ConfigError(f"{p}: sample rate {w.sample_rate} != audio.sample_rate {cfg.audio.sample_rate}")
            if len(w) >= t.crop_len:
                clips.append(w.samples)
        if not clips:
            raise ConfigError(f"no clip in {t.data!r} is at least train.crop_len samples long")
        return clips
    waves = synth_dataset(t.n_clips, t.clip_len, derive_seed(t.seed, "data"), cfg.audio.sample_rate)
    return [w.samples for w in waves]


@dataclass
class Batcher:
    """Random hop-aligned crops with their mel frames, drawn from a fixed pool."""

    clips: list[np.ndarray]
    mels: list[np.ndarray]
    crop_len: int
    hop: int
    batch_size: int
    rng: np.random.Generator
    dtype: torch.dtype
    _order: list[int] = field(default_factory=list)

    def next(self) -> tuple[torch.Tensor, torch.Tensor]:
        xs, ms = [], []
        for _ in range(self.batch_size):
            if not self._order:
                self._order = list(self.rng.permutation(len(self.clips)))
            i = self._order.pop()
            clip = self.clips[i]
            n_pos = (len(clip) - self.crop_len) // self.hop + 1
            f = int(self.rng.integers(0, n_pos))
            s = f * self.hop
            xs.append(clip[s:s + self.crop_len])
            ms.append(self.mels[i][:, f:f + self.crop_len // self.hop])
        x = torch.as_tensor(np.stack(xs), dtype=self.dtype).unsqueeze(1)
        return x, torch.as_tensor(np.stack(ms), dtype=self.dtype)


def make_batcher(cfg: RunConfig, clips: list[np.ndarray]) -> Batcher:
    mels = [mel_spectrogram(c, cfg.audio) for c in clips]
    return Batcher(clips, mels, cfg.train.crop_len, cfg.audio.hop, cfg.train.batch_size,
                   np.random.default_rng(derive_seed(cfg.train.seed, "crops")),
                   torch_dtype(cfg.train.dtype))


def build_model(cfg: RunConfig) -> CNFVocoder:
    torch.manual_seed(derive_seed(cfg.train.seed, "init"))
    return CNFVocoder(cfg.model_config()).to(torch_dtype(cfg.train.dtype))


@dataclass
class TrainResult:
    model: CNFVocoder
    rows: list[MetricsRow]
    losses: list[float]
    checkpoint: Path | None


def train(cfg: RunConfig, out_dir: str | Path | None = None, model: CNFVocoder | None = None,
          clips: list[np.ndarray] | None = None) -> TrainResult:
    """Run ``cfg.train.steps`` optimiser steps.

    Writes ``metrics.csv`` and ``checkpoint.safetensors`` under ``out_dir``
    when given. A non-finite loss aborts with :class:`NonFiniteLoss`; the
    last checkpoint written before it stays on disk.
    """
    if cfg.train.seed is None:
        raise ConfigError("train.seed is mandatory")
    cfg.validate()
    torch.set_num_threads(max(1, cfg.train.threads))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.safetensors" if out is not None else None

    model = model if model is not None else build_model(cfg)
    batcher = make_batcher(cfg, clips if clips is not None else load_clips(cfg))
    probes = torch.Generator().manual_seed(derive_seed(cfg.train.seed, "probes"))
    solver = training_solver(cfg)
    trace = model.default_trace(probes)
    metrics = MetricsWriter(out / "metrics.csv" if out is not None else None)
    chash = cfg.hash()

    opt = torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
    model.train()
    losses: list[float] = []
    nfe_window: list[int] = []
    start = time.perf_counter()
    for step in range(1, cfg.train.steps + 1):
        x, mel = batcher.next()
        if step == 1 and any(not bool(getattr(n, "initialized", True)) for n in model.norms):
            model.initialize(x, mel)
        opt.zero_grad(set_to_none=True)
        loss, res = model.nll_loss(x, mel, solver, trace)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLoss(f"non-finite loss at step {step}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.train.grad_clip)
        opt.step()
        losses.append(value)
        nfe_window.append(res.nfe)
        if step == 1 or step % cfg.train.log_every == 0 or step == cfg.train.steps:
            row = MetricsRow(step, time.perf_counter() - start, value, float(np.mean(nfe_window)),
                             cfg.model.train_tolerance, "", chash)
            metrics.write(row)
            log.info("step %d loss %.5f nfe %.1f", step, value, row.nfe_forward_mean)
            nfe_window = []
        if ckpt is not None and step % cfg.train.ckpt_every == 0:
            save_checkpoint(ckpt, model, cfg, step)
    if ckpt is not None:
        save_checkpoint(ckpt, model, cfg, cfg.train.steps)
    model.eval()
    return TrainResult(model, metrics.rows, losses, ckpt)
