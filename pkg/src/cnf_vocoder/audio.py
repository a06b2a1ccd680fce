"""Waveform I/O, STFT and mel front end, Griffin-Lim, and a synthetic corpus."""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MEL_FLOOR = 1e-5
MEL_CACHE_VERSION = 1


class AudioConfigError(ValueError):
    pass


class WavFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0

    def validate(self) -> None:
        if self.win_length > self.n_fft:
            raise AudioConfigError(f"win_length {self.win_length} exceeds n_fft {self.n_fft}")
        if self.hop > self.win_length:
            raise AudioConfigError(f"hop {self.hop} exceeds win_length {self.win_length}")
        if self.fmax > self.sample_rate / 2:
            raise AudioConfigError(f"fmax {self.fmax} Hz exceeds Nyquist {self.sample_rate / 2} Hz")
        if not 0 <= self.fmin < self.fmax:
            raise AudioConfigError("need 0 <= fmin < fmax")


@dataclass
class Waveform:
    samples: np.ndarray  # float64, [-1, 1]
    sample_rate: int

    def __len__(self):
        return len(self.samples)


# ---------------------------------------------------------------- wav io

def wav_write(path, wave_: Waveform) -> None:
    x = np.clip(np.asarray(wave_.samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(wave_.sample_rate))
        w.writeframes(pcm.tobytes())


def wav_read(path) -> Waveform:
    """Read 16-bit PCM mono RIFF/WAVE, normalised by 32768."""
    path = Path(path)
    if path.stat().st_size == 0:
        raise WavFormatError(f"{path}: empty file, missing 'RIFF' chunk")
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise WavFormatError(f"{path}: unsupported or malformed 'fmt ' chunk ({e})") from e
    if width != 2:
        raise WavFormatError(f"{path}: 'fmt ' chunk declares {8 * width}-bit samples, need 16-bit PCM")
    if channels != 1:
        raise WavFormatError(f"{path}: 'fmt ' chunk declares {channels} channels, need mono")
    pcm = np.frombuffer(frames, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


# ---------------------------------------------------------------- stft

def hann(n: int) -> np.ndarray:
    # periodic Hann, COLA at hop = n/4
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _window(win_length: int, n_fft: int) -> np.ndarray:
    w = np.zeros(n_fft)
    off = (n_fft - win_length) // 2
    w[off:off + win_length] = hann(win_length)
    return w


def n_frames(length: int, hop: int) -> int:
    return -(-length // hop)


def stft(x: np.ndarray, n_fft: int = 1024, hop: int = 256, win_length: int | None = None) -> np.ndarray:
    """Centre-padded (reflect) STFT, shape [n_fft//2 + 1, ceil(L / hop)]."""
    win_length = win_length or n_fft
    if win_length > n_fft:
        raise AudioConfigError(f"win_length {win_length} exceeds n_fft {n_fft}")
    if hop > win_length:
        raise AudioConfigError(f"hop {hop} exceeds win_length {win_length}")
    x = np.asarray(x, dtype=np.float64)
    pad = n_fft // 2
    mode = "reflect" if len(x) > pad else "constant"
    xp = np.pad(x, pad, mode=mode)
    t = n_frames(len(x), hop)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(t)[:, None]
    frames = xp[idx] * _window(win_length, n_fft)
    return np.fft.rfft(frames, axis=1).T


def istft(spec: np.ndarray, n_fft: int = 1024, hop: int = 256, win_length: int | None = None,
          length: int | None = None) -> np.ndarray:
    """Least-squares inverse of :func:`stft`.

    Overlap-adds the windowed frames, folds the contributions that landed in
    the reflect padding back onto the samples they mirror, and divides by the
    equally folded squared-window sum. This is the exact pseudo-inverse of the
    padded STFT, which keeps Griffin-Lim's error monotone.
    """
    win_length = win_length or n_fft
    t = spec.shape[1]
    length = length if length is not None else t * hop
    w = _window(win_length, n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * w
    total = n_fft + hop * (t - 1)
    starts = hop * np.arange(t)
    idx = (starts[:, None] + np.arange(n_fft)[None, :]).ravel()
    out = np.bincount(idx, weights=frames.ravel(), minlength=total)
    norm = np.bincount(idx, weights=np.tile(w ** 2, t), minlength=total)
    pad = n_fft // 2
    n = np.arange(total) - pad
    if length > pad:
        n = np.abs(n)
        n = np.where(n > length - 1, 2 * (length - 1) - n, n)
    keep = (n >= 0) & (n < length)
    y = np.bincount(n[keep], weights=out[keep], minlength=length)[:length]
    nrm = np.bincount(n[keep], weights=norm[keep], minlength=length)[:length]
    return y / np.where(nrm > 1e-10, nrm, 1.0)


# ---------------------------------------------------------------- mel

def _hz_to_mel(f):
    # Slaney: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, logstep = 1000.0, np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_hz / f_sp + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep,
                    f / f_sp)


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz, logstep = 1000.0, np.log(6.4) / 27.0
    min_log_mel = min_log_hz / f_sp
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(cfg: AudioConfig) -> np.ndarray:
    """Triangular filters with Slaney area normalisation, [n_mels, n_fft//2 + 1]."""
    cfg.validate()
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    mel_pts = np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz = _mel_to_hz(mel_pts)
    fdiff = np.diff(hz)
    ramps = hz[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0, np.minimum(lower, upper))
    weights *= (2.0 / (hz[2:] - hz[:-2]))[:, None]
    return weights


def mel_spectrogram(x: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """Natural-log mel magnitude spectrogram, [n_mels, ceil(L / hop)]."""
    cfg.validate()
    mag = np.abs(stft(x, cfg.n_fft, cfg.hop, cfg.win_length))
    return np.log(np.maximum(mel_filterbank(cfg) @ mag, MEL_FLOOR))


def mel_to_linear(log_mel: np.ndarray, cfg: AudioConfig) -> np.ndarray:
    """Approximate linear magnitude via the filterbank pseudo-inverse, clipped at 0."""
    basis = mel_filterbank(cfg)
    return np.maximum(np.linalg.pinv(basis) @ np.exp(log_mel), 0.0)


def save_mel(path, log_mel: np.ndarray) -> None:
    """Versioned binary cache: ``.npy`` (dtype and shape header) plus a version row."""
    arr = np.asarray(log_mel, dtype="<f4")
    with open(path, "wb") as fh:
        np.save(fh, np.array([MEL_CACHE_VERSION], dtype="<i4"))
        np.save(fh, arr)


def load_mel(path) -> np.ndarray:
    with open(path, "rb") as fh:
        version = np.load(fh)
        if version.shape != (1,) or int(version[0]) != MEL_CACHE_VERSION:
            raise AudioConfigError(f"{path}: unsupported mel cache version {version}")
        arr = np.load(fh)
    if arr.ndim != 2:
        raise AudioConfigError(f"{path}: mel cache must be [n_mels, T], got {arr.shape}")
    return arr.astype(np.float64)


# ---------------------------------------------------------------- griffin-lim

def spectral_convergence(x: np.ndarray, magnitude: np.ndarray, n_fft: int, hop: int,
                         win_length: int | None = None) -> float:
    est = np.abs(stft(x, n_fft, hop, win_length))
    return float(np.linalg.norm(est - magnitude) / np.linalg.norm(magnitude))


def locked_phase(magnitude: np.ndarray, n_fft: int, hop: int, seed: int = 0,
                 rel_floor: float = 1e-3) -> np.ndarray:
    """Phase-vocoder initial phase, locked to spectral peaks.

    Each peak's frequency is refined by parabolic interpolation of the log
    magnitude; its phase advances by that frequency times the hop from the
    nearest peak of the previous frame (new peaks start at a seeded random
    phase). Bins take the phase of their nearest peak shifted by the Hann
    window's linear phase, -pi per bin of offset.
    """
    rng = np.random.default_rng(seed)
    n_bins, n_t = magnitude.shape
    logm = np.log(np.maximum(magnitude, 1e-12))
    bins = np.arange(n_bins)
    phase = np.zeros((n_bins, n_t))
    prev_k0 = np.empty(0)
    prev_phi = np.empty(0)
    for m in range(n_t):
        col = magnitude[:, m]
        thr = rel_floor * col.max()
        padded = np.r_[-np.inf, col, -np.inf]
        peaks = bins[(col > padded[:-2]) & (col >= padded[2:]) & (col > thr)]
        if col.max() <= 0 or peaks.size == 0:
            phase[:, m] = rng.uniform(0, 2 * np.pi, n_bins)
            prev_k0 = np.empty(0)
            continue
        a = logm[np.maximum(peaks - 1, 0), m]
        b = logm[peaks, m]
        c = logm[np.minimum(peaks + 1, n_bins - 1), m]
        den = a - 2 * b + c
        safe = np.where(np.abs(den) > 1e-12, den, 1.0)
        k0 = peaks + np.clip(np.where(np.abs(den) > 1e-12, 0.5 * (a - c) / safe, 0.0), -0.5, 0.5)
        phi = rng.uniform(0, 2 * np.pi, peaks.size)
        if prev_k0.size:
            j = np.argmin(np.abs(prev_k0[None, :] - k0[:, None]), axis=1)
            tracked = np.abs(prev_k0[j] - k0) <= 2.0
            advance = np.pi * (prev_k0[j] + k0) / n_fft * hop
            phi = np.where(tracked, prev_phi[j] + advance, phi)
        owner = np.argmin(np.abs(bins[:, None] - k0[None, :]), axis=1)
        phase[:, m] = phi[owner] - np.pi * (bins - k0[owner])
        prev_k0, prev_phi = k0, phi
    return np.exp(1j * phase)


def griffin_lim(magnitude: np.ndarray, n_iters: int = 32, n_fft: int = 1024, hop: int = 256,
                win_length: int | None = None, length: int | None = None, seed: int = 0,
                init: str = "locked", history: list | None = None) -> np.ndarray:
    """Phase retrieval by alternating STFT-consistency and magnitude projections.

    ``init`` selects the starting phase: ``"locked"`` (peak-locked phase
    vocoder, see :func:`locked_phase`), ``"random"`` (seeded uniform) or
    ``"zero"``. If ``history`` is given, the spectral convergence of every
    iterate, the initial one included, is appended to it.
    """
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if magnitude.ndim != 2 or magnitude.shape[0] != n_fft // 2 + 1:
        raise ValueError(f"magnitude must be [{n_fft // 2 + 1}, T], got {magnitude.shape}")
    if (magnitude < 0).any():
        raise ValueError("magnitude must be non-negative")
    length = length if length is not None else magnitude.shape[1] * hop
    if init == "locked":
        phase = locked_phase(magnitude, n_fft, hop, seed)
    elif init == "random":
        phase = np.exp(2j * np.pi * np.random.default_rng(seed).uniform(size=magnitude.shape))
    elif init == "zero":
        phase = np.ones_like(magnitude, dtype=np.complex128)
    else:
        raise ValueError(f"unknown init {init!r}")
    x = istft(magnitude * phase, n_fft, hop, win_length, length)
    for _ in range(n_iters):
        spec = stft(x, n_fft, hop, win_length)
        if history is not None:
            history.append(float(np.linalg.norm(np.abs(spec) - magnitude) / np.linalg.norm(magnitude)))
        x = istft(magnitude * np.exp(1j * np.angle(spec)), n_fft, hop, win_length, length)
    if history is not None:
        history.append(spectral_convergence(x, magnitude, n_fft, hop, win_length))
    return x


def spectral_snr(x: np.ndarray, magnitude: np.ndarray, n_fft: int, hop: int,
                 win_length: int | None = None) -> float:
    """Reconstruction SNR in dB between a target magnitude and that of ``x``."""
    return -20.0 * np.log10(spectral_convergence(x, magnitude, n_fft, hop, win_length))


# ---------------------------------------------------------------- synthetic corpus

def synth_clip(rng: np.random.Generator, clip_len: int, sample_rate: int) -> np.ndarray:
    t = np.arange(clip_len) / sample_rate
    x = np.zeros(clip_len)
    for _ in range(rng.integers(2, 5)):
        freq = rng.uniform(80.0, 2000.0)
        amp = rng.uniform(0.2, 1.0)
        # slow random envelope: raised cosine with random rate and phase
        rate = rng.uniform(0.5, 4.0)
        env = 0.5 + 0.5 * np.cos(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        x += amp * env * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    peak = np.max(np.abs(x))
    if peak > 0:
        x *= rng.uniform(0.3, 0.9) / peak
    x += 0.01 * rng.standard_normal(clip_len)  # -40 dB noise floor
    return np.clip(x, -0.95, 0.95)


def synth_dataset(n_clips: int, clip_len: int, seed: int, sample_rate: int = 22050) -> list[Waveform]:
    """Deterministic sinusoid mixtures (2-4 partials, 80-2000 Hz) with envelopes."""
    children = np.random.SeedSequence(seed).spawn(n_clips)
    return [Waveform(synth_clip(np.random.default_rng(s), clip_len, sample_rate), sample_rate)
            for s in children]
