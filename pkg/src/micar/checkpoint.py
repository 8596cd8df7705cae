"""Checkpoint file: ``MICAR1`` magic, JSON header, raw little-endian float64 blobs.

Layout::

    b"MICAR1\\n" | uint64 LE header length | header JSON (UTF-8, sorted keys) | blobs

The header lists every blob (name, kind, shape) in payload order: parameters
(lexicographic), buffers, then optimizer first and second moments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from micar.data import Vocabulary
from micar.errors import ConfigurationError, DataLoadError
from micar.model import MicarVLMoE, ModelConfig
from micar.optim import AdamW

MAGIC = b"MICAR1\n"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    header: dict
    arrays: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.header["model_config"])

    @property
    def step(self) -> int:
        return int(self.header["step"])

    @property
    def vocab(self) -> Optional[Vocabulary]:
        v = self.header.get("vocab")
        return Vocabulary.from_json(v) if v else None


def _blobs(model: MicarVLMoE, optimizer: Optional[AdamW]):
    params = model.params()
    for name in params:
        yield name, "param", params[name].data
    for name, buf in model.named_buffers():
        yield name, "buffer", buf
    if optimizer is not None:
        for name in params:
            yield name, "adam_m", optimizer.m[name]
        for name in params:
            yield name, "adam_v", optimizer.v[name]


def save_checkpoint(path, model: MicarVLMoE, optimizer: Optional[AdamW] = None, step: int = 0,
                    vocab: Optional[Vocabulary] = None, extra: Optional[dict] = None) -> Path:
    blobs = list(_blobs(model, optimizer))
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "step": int(step),
        "optimizer": None if optimizer is None else {
            "lr": optimizer.lr, "msve_lr": optimizer.msve_lr, "weight_decay": optimizer.weight_decay,
            "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps,
            "step_count": optimizer.step_count, "lr_scale": optimizer.lr_scale,
        },
        "vocab": vocab.to_json() if vocab is not None else None,
        "extra": extra or {},
        "blobs": [{"name": n, "kind": k, "shape": list(a.shape)} for n, k, a in blobs],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for _, _, arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataLoadError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + n].decode("utf-8"))
    pos += n
    if header.get("format_version") != FORMAT_VERSION:
        raise DataLoadError(f"{path}: unsupported format version {header.get('format_version')}")
    arrays = {}
    for blob in header["blobs"]:
        count = int(np.prod(blob["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(blob["shape"]).astype(np.float64)
        pos += 8 * count
        arrays[(blob["kind"], blob["name"])] = arr
    if pos != len(raw):
        raise DataLoadError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(header, arrays)


def restore(ckpt: Checkpoint, model: MicarVLMoE, optimizer: Optional[AdamW] = None) -> None:
    """Copy checkpoint arrays into ``model`` (and ``optimizer``); shape or name mismatches raise."""
    params = model.params()
    expected = {("param", n): params[n].data for n in params}
    expected.update({("buffer", n): b for n, b in model.named_buffers()})
    if optimizer is not None:
        if ckpt.header.get("optimizer") is None:
            raise ConfigurationError("checkpoint holds no optimizer state")
        expected.update({("adam_m", n): optimizer.m[n] for n in params})
        expected.update({("adam_v", n): optimizer.v[n] for n in params})
    for key, target in expected.items():
        if key not in ckpt.arrays:
            raise ConfigurationError(f"checkpoint is missing {key[0]} {key[1]}")
        src = ckpt.arrays[key]
        if src.shape != target.shape:
            raise ConfigurationError(f"shape mismatch for {key[0]} {key[1]}: checkpoint {src.shape}, model {target.shape}")
    model_keys = {k for k in ckpt.arrays if k[0] in ("param", "buffer")}
    stray = sorted(model_keys - set(expected))
    if stray:
        raise ConfigurationError(f"checkpoint has parameters unknown to the model: {stray[0][1]}")
    for key, target in expected.items():
        target[...] = ckpt.arrays[key]
    if optimizer is not None:
        o = ckpt.header["optimizer"]
        optimizer.step_count = int(o["step_count"])
        optimizer.lr_scale = float(o["lr_scale"])


def model_from_checkpoint(path) -> tuple[MicarVLMoE, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = MicarVLMoE(ckpt.model_config)
    restore(ckpt, model)
    model.eval()
    return model, ckpt
