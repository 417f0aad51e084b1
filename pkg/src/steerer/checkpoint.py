"""Versioned binary checkpoints.

Layout: ``b"STEERCKPT"``, uint32 LE format version, uint64 LE length of a
UTF-8 JSON metadata block (config snapshot, epoch, Adam step counts, metric
history), then a named-tensor block holding parameters, norm buffers and
Adam moments. JSON keys are sorted so identical training runs produce
identical bytes.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from steerer.config import RunConfig
from steerer.model import BackboneConfig, SteererModel
from steerer.serialize import FormatError, read_tensors, write_tensors

MAGIC = b"STEERCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    model: SteererModel
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def build_model(cfg: RunConfig) -> SteererModel:
    m = cfg.model
    bcfg = BackboneConfig(levels=m.levels, channels=m.channels, stem_layers=m.stem_layers,
                          stage_layers=m.stage_layers)
    return SteererModel(bcfg, m.fusion_mode, seed=cfg.seed, dtype=np.dtype(m.dtype).type)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    params = list(ckpt.model.named_parameters())
    tensors = dict(ckpt.model.state_dict())
    for name, p in params:
        tensors[f"adam_m/{name}"] = p.m
        tensors[f"adam_v/{name}"] = p.v
    meta = {
        # round-trip through the typed setters so e.g. an int left in a float field
        # serializes the same way it will after loading
        "config": RunConfig.from_dict(ckpt.config.to_dict()).to_dict(),
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "adam_steps": {name: p.step for name, p in params},
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<Q", len(meta_raw)))
    buf.write(meta_raw)
    write_tensors(buf, tensors)
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {VERSION}")
    pos += 4
    (mlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        meta = json.loads(raw[pos:pos + mlen].decode("utf-8"))
        tensors = read_tensors(io.BytesIO(raw[pos + mlen:]))
    except (UnicodeDecodeError, json.JSONDecodeError, FormatError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint: {exc}") from exc
    cfg = RunConfig.from_dict(meta["config"])
    model = build_model(cfg)
    model.load_state_dict(tensors)
    for name, p in model.named_parameters():
        p.m[...] = tensors[f"adam_m/{name}"]
        p.v[...] = tensors[f"adam_v/{name}"]
        p.step = int(meta["adam_steps"][name])
    return Checkpoint(cfg, model, int(meta["epoch"]), list(meta["history"]))
