from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest
import torch

from cnf_vocoder import audio
from cnf_vocoder.config import RunConfig, derive_seed
from cnf_vocoder.train import TrainResult, train

from helpers import toy_config

torch.set_num_threads(1)


@dataclass
class OverfitRun:
    cfg: RunConfig
    clips: list[np.ndarray]
    result: TrainResult


@pytest.fixture(scope="session")
def overfit_run() -> OverfitRun:
    """200 steps on two whole 1024-sample clips, every batch holding both.

    This is a deliberately degenerate fit: unseen inputs land far out in
    the latent tails, so it is not used for numerical round-trip checks.
    """
    cfg = toy_config(train__steps=200, train__n_clips=2, train__clip_len=1024,
                     train__crop_len=1024, train__batch_size=2, train__log_every=20)
    waves = audio.synth_dataset(2, 1024, derive_seed(cfg.train.seed, "data"), cfg.audio.sample_rate)
    clips = [w.samples for w in waves]
    return OverfitRun(cfg, clips, train(cfg, clips=clips))


@pytest.fixture(scope="session")
def toy_run() -> TrainResult:
    """60 steps of random 1024-sample crops from four 4096-sample clips."""
    return train(toy_config(train__steps=60))


@pytest.fixture(scope="session")
def toy_model(toy_run):
    return toy_run.model


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config(train__steps=60)


def crops_with_mels(cfg: RunConfig, n: int, length: int, seed: int):
    """``n`` random hop-aligned crops from fresh synthetic clips, with mel frames."""
    rng = np.random.default_rng(seed)
    waves = audio.synth_dataset(max(4, n // 4), 4 * length, seed, cfg.audio.sample_rate)
    mels = [audio.mel_spectrogram(w.samples, cfg.audio) for w in waves]
    hop = cfg.audio.hop
    xs, ms = [], []
    for _ in range(n):
        i = int(rng.integers(len(waves)))
        f = int(rng.integers(0, (4 * length - length) // hop + 1))
        xs.append(waves[i].samples[f * hop:f * hop + length])
        ms.append(mels[i][:, f:f + length // hop])
    return (torch.as_tensor(np.stack(xs)).unsqueeze(1), torch.as_tensor(np.stack(ms)))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
