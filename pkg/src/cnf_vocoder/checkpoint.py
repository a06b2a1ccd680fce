"""Checkpoint container.

A safetensors file: a JSON header naming every tensor with its dtype, shape
and byte range, followed by the raw little-endian values. The header's
metadata carries the format tag and version, the flat config echo and the
training step. Norm running statistics and actnorm init flags are ordinary
entries of the state dict.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .config import RunConfig
from .flow import CNFVocoder

FORMAT = "cnf-vocoder-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: CNFVocoder, cfg: RunConfig, step: int) -> None:
    """Write atomically: a failed save never clobbers the previous file."""
    path = Path(path)
    tensors = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    meta = {
        "format": FORMAT,
        "version": str(VERSION),
        "config": json.dumps(cfg.flat()),
        "step": str(step),
    }
    tmp = path.with_name(path.name + ".tmp")
    save_file(tensors, str(tmp), metadata=meta)
    os.replace(tmp, path)


def read_metadata(path) -> dict:
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if int(meta.get("version", -1)) != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta


def load_checkpoint(path) -> tuple[CNFVocoder, RunConfig, int]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    meta = read_metadata(path)
    cfg = RunConfig().with_overrides(json.loads(meta["config"]))
    tensors = {}
    with safe_open(str(path), framework="pt") as f:
        for k in f.keys():
            tensors[k] = f.get_tensor(k)
    dtype = tensors["upsampler.conv.weight"].dtype
    model = CNFVocoder(cfg.model_config()).to(dtype)
    model.load_state_dict(tensors)
    model.eval()
    return model, cfg, int(meta["step"])
