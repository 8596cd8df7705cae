"""Report embedding, gated feedforward network and the pre-norm latent encoder."""

from __future__ import annotations

from typing import Optional

import numpy as np

from micar.attention import MDLA, MdlaConfig
from micar.autodiff import ops
from micar.autodiff.params import Module, normal_init
from micar.autodiff.tensor import Tensor
from micar.errors import ConfigurationError, VocabularyError
from micar.layers import RMSNorm


def sinusoidal_table(max_len: int, d_model: int) -> np.ndarray:
    """``P[pos, 2i] = sin(pos / 10000^(2i/d))``, ``P[pos, 2i+1] = cos(...)``."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : d_model // 2]
    return table


class ReportEmbedding(Module):
    """``Embedding(ids) * sqrt(d_model) + P``."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, d_model: int, max_len: int):
        self.table = normal_init(rng, (vocab_size, d_model))
        self.positional = sinusoidal_table(max_len, d_model)
        self.scale = float(np.sqrt(d_model))

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            bad = int(ids.max() if ids.max() >= self.vocab_size else ids.min())
            raise VocabularyError(f"token id {bad} outside vocabulary of size {self.vocab_size}")
        s = ids.shape[-1]
        if s > self.positional.shape[0]:
            raise ConfigurationError(f"sequence length {s} exceeds positional table {self.positional.shape[0]}")
        return ops.add(ops.mul(ops.embedding(self.table, ids), self.scale), self.positional[:s])


class GatedFFN(Module):
    """``(act(x W1) * (x W3)) W2``."""

    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int, activation: str = "silu"):
        if activation not in ops.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.w1 = normal_init(rng, (d_model, d_ff))
        self.w3 = normal_init(rng, (d_model, d_ff))
        self.w2 = normal_init(rng, (d_ff, d_model))
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = ops.ACTIVATIONS[self.activation]
        return ops.matmul(ops.mul(act(ops.matmul(x, self.w1)), ops.matmul(x, self.w3)), self.w2)


class EncoderBlock(Module):
    """``H = MDLA(RN(X)) + X``; ``out = FFN(RN(H)) + H`` with block dropout on each sublayer."""

    def __init__(self, rng: np.random.Generator, cfg: MdlaConfig, d_ff: int, activation: str = "silu",
                 block_dropout: float = 0.1, eps: float = 1e-6):
        self.norm1 = RMSNorm(cfg.d_model, eps)
        self.attn = MDLA(rng, cfg)
        self.norm2 = RMSNorm(cfg.d_model, eps)
        self.ffn = GatedFFN(rng, cfg.d_model, d_ff, activation)
        self.block_dropout = block_dropout

    def __call__(self, x: Tensor, positions=None, rng: Optional[np.random.Generator] = None) -> Tensor:
        a, _ = self.attn(self.norm1(x), q_pos=positions, k_pos=positions, rng=rng)
        h = ops.add(ops.dropout(a, self.block_dropout, self.training, rng), x)
        f = self.ffn(self.norm2(h))
        return ops.add(ops.dropout(f, self.block_dropout, self.training, rng), h)


class LatentEncoder(Module):
    """A stack of encoder blocks followed by one RMSNorm."""

    def __init__(self, rng: np.random.Generator, cfg: MdlaConfig, d_ff: int, depth: int,
                 activation: str = "silu", block_dropout: float = 0.1, eps: float = 1e-6):
        if depth < 1:
            raise ConfigurationError(f"encoder depth must be >= 1, got {depth}")
        self.blocks = [EncoderBlock(rng, cfg, d_ff, activation, block_dropout, eps) for _ in range(depth)]
        self.norm = RMSNorm(cfg.d_model, eps)

    def __call__(self, patches: Tensor, positions=None, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = patches
        for block in self.blocks:
            x = block(x, positions, rng)
        return self.norm(x)
