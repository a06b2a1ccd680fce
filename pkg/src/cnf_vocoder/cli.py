"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.
Every config key is also a flag of the same name, e.g. ``--model.n_blocks 2``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import audio
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, config_keys, derive_seed, load_config
from .flow import CNFVocoder, count_parameters
from .inference import (BENCH_GRID, ModelMismatch, bench_tolerance, evaluate_cll, list_wavs,
                        synthesize, write_bench_csv)
from .odeint import SolverError
from .train import NonFiniteLoss, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="root seed (train.seed)")
    common.add_argument("--tolerance", type=float, help="ODE solver tolerance (rtol = atol)")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--out", help="output path")
    common.add_argument("--mode", choices=["hutchinson", "exact"], default="hutchinson")
    common.add_argument("-v", "--verbose", action="store_true")
    for key in config_keys():
        common.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE")

    p = argparse.ArgumentParser(prog="cnf-vocoder", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    sub.add_parser("train", parents=[common], help="train a model")
    s = sub.add_parser("synth", parents=[common], help="synthesise a waveform from a mel file")
    s.add_argument("mel", help="mel cache file (see `mel`)")
    e = sub.add_parser("eval", parents=[common], help="conditional log-likelihood of a dataset")
    e.add_argument("data", help="directory of .wav files")
    b = sub.add_parser("bench-tol", parents=[common], help="NFE and speed across tolerances")
    b.add_argument("mel")
    b.add_argument("--grid", default=",".join(f"{t:g}" for t in BENCH_GRID))
    b.add_argument("--repeats", type=int, default=3)
    sub.add_parser("params", parents=[common], help="trainable parameter count")
    m = sub.add_parser("mel", parents=[common], help="extract a mel cache from a wav")
    m.add_argument("wav")
    g = sub.add_parser("griffin-lim", parents=[common], help="Griffin-Lim baseline from a mel file")
    g.add_argument("mel")
    g.add_argument("--iters", type=int, default=32)
    d = sub.add_parser("gen-data", parents=[common], help="write the synthetic corpus as wavs")
    d.add_argument("--n-clips", type=int)
    d.add_argument("--clip-len", type=int)
    return p


def _run_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    return load_config(args.config, overrides)


def _need(args, name):
    v = getattr(args, name)
    if v is None:
        raise UsageError(f"--{name} is required for `{args.cmd}`")
    return v


def _print(obj) -> None:
    print(json.dumps(obj, indent=None, sort_keys=False))


def cmd_train(args, cfg: RunConfig) -> None:
    if cfg.train.seed is None:
        raise UsageError("a seed is mandatory: pass --seed or set train.seed")
    out = Path(_need(args, "out"))
    if args.tolerance is not None:
        cfg = cfg.with_overrides({"model.train_tolerance": args.tolerance})
    res = train(cfg, out)
    last = res.rows[-1]
    _print({"checkpoint": str(res.checkpoint), "metrics": str(out / "metrics.csv"),
            "steps": last.step, "loss": last.loss, "nfe_forward_mean": last.nfe_forward_mean})


def _load(args) -> tuple[CNFVocoder, RunConfig]:
    model, cfg, _ = load_checkpoint(_need(args, "checkpoint"))
    return model, cfg


def cmd_synth(args, _cfg) -> None:
    model, cfg = _load(args)
    mel = audio.load_mel(args.mel)
    tol = args.tolerance if args.tolerance is not None else cfg.eval.tolerance
    wav, rep = synthesize(model, mel, tol, cfg.eval.latent_seed, cfg.eval.temperature)
    out = _need(args, "out")
    audio.wav_write(out, audio.Waveform(wav, cfg.audio.sample_rate))
    _print({"out": out, "samples": rep.samples, "seconds": rep.seconds,
            "samples_per_sec": rep.samples_per_sec, "nfe": rep.nfe, "tolerance": rep.tolerance})


def cmd_eval(args, _cfg) -> None:
    model, cfg = _load(args)
    paths = list_wavs(args.data)
    if not paths:
        raise UsageError(f"empty dataset: no .wav files in {args.data}")
    clips = [audio.wav_read(p).samples for p in paths]
    mels = [audio.mel_spectrogram(c, cfg.audio) for c in clips]
    tol = args.tolerance if args.tolerance is not None else cfg.model.train_tolerance
    try:
        rep = evaluate_cll(model, clips, mels, args.mode, tol, cfg.eval.exact_cap,
                           derive_seed(cfg.train.seed or 0, "eval-probes"))
    except ValueError as e:
        raise UsageError(str(e)) from e
    _print({"mode": rep.mode, "n_clips": rep.n_clips, "cll_mean": rep.cll_mean,
            "cll_stderr": rep.cll_stderr})


def cmd_bench(args, _cfg) -> None:
    model, cfg = _load(args)
    try:
        grid = [float(t) for t in args.grid.split(",") if t.strip()]
    except ValueError as e:
        raise UsageError(f"--grid: {e}") from e
    if not grid:
        raise UsageError("--grid is empty")
    rows = bench_tolerance(model, audio.load_mel(args.mel), grid, cfg.eval.latent_seed, args.repeats)
    out = _need(args, "out")
    write_bench_csv(out, rows)
    _print({"out": out, "rows": [r.__dict__ for r in rows]})


def cmd_params(args, cfg: RunConfig) -> None:
    model = CNFVocoder(cfg.model_config())
    _print({"total": count_parameters(model), "breakdown": model.param_breakdown()})


def cmd_mel(args, cfg: RunConfig) -> None:
    w = audio.wav_read(args.wav)
    if w.sample_rate != cfg.audio.sample_rate:
        raise ConfigError(f"{args.wav}: sample rate {w.sample_rate} != audio.sample_rate {cfg.audio.sample_rate}")
    mel = audio.mel_spectrogram(w.samples, cfg.audio)
    out = _need(args, "out")
    audio.save_mel(out, mel)
    _print({"out": out, "shape": list(mel.shape)})


def cmd_griffin_lim(args, cfg: RunConfig) -> None:
    a = cfg.audio
    mel = audio.load_mel(args.mel)
    if mel.shape[0] != a.n_mels:
        raise ConfigError(f"mel has {mel.shape[0]} bands, audio.n_mels is {a.n_mels}")
    mag = audio.mel_to_linear(mel, a)
    seed = derive_seed(cfg.train.seed or 0, "griffin-lim")
    wav = audio.griffin_lim(mag, args.iters, a.n_fft, a.hop, a.win_length, seed=seed)
    wav = np.clip(wav, -1.0, 1.0)
    out = _need(args, "out")
    audio.wav_write(out, audio.Waveform(wav, a.sample_rate))
    _print({"out": out, "samples": len(wav)})


def cmd_gen_data(args, cfg: RunConfig) -> None:
    if cfg.train.seed is None:
        raise UsageError("a seed is mandatory: pass --seed or set train.seed")
    out = Path(_need(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    n = args.n_clips or cfg.train.n_clips
    length = args.clip_len or cfg.train.clip_len
    waves = audio.synth_dataset(n, length, derive_seed(cfg.train.seed, "data"), cfg.audio.sample_rate)
    for i, w in enumerate(waves):
        audio.wav_write(out / f"clip_{i:04d}.wav", w)
    _print({"out": str(out), "n_clips": n, "clip_len": length})


COMMANDS = {
    "train": cmd_train, "synth": cmd_synth, "eval": cmd_eval, "bench-tol": cmd_bench,
    "params": cmd_params, "mel": cmd_mel, "griffin-lim": cmd_griffin_lim, "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        COMMANDS[args.cmd](args, cfg)
    except (ConfigError, UsageError, CheckpointError, ModelMismatch, audio.AudioConfigError,
            audio.WavFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, NonFiniteLoss, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
