"""Multihead dual-branch latent attention (MDLA).

Queries, keys and values pass through a per-projection latent bottleneck
(``d_model -> d_model/h``, RMSNorm, ``-> d_latent``). Each head's query/key
slice is split into a content-only part and a rotary part; both contribute to
one score matrix scaled by ``1/sqrt(d_latent)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from micar.autodiff import ops
from micar.autodiff.params import Module, normal_init
from micar.autodiff.tensor import Tensor
from micar.errors import ConfigurationError, DimensionError
from micar.layers import RMSNorm

MASK_VALUE = -1e30


@dataclass
class MdlaConfig:
    d_model: int = 512
    d_latent: int = 768
    heads: int = 8
    d_nope: int = 48
    d_rope: int = 48
    attn_dropout: float = 0.12
    rope_base: float = 10000.0

    @property
    def head_dim(self) -> int:
        return self.d_latent // self.heads

    @property
    def down_dim(self) -> int:
        return self.d_model // self.heads

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.d_latent % self.heads:
            raise ConfigurationError(f"d_latent={self.d_latent} not divisible by heads={self.heads}")
        if self.d_nope + self.d_rope != self.head_dim:
            raise ConfigurationError(
                f"d_nope + d_rope = {self.d_nope + self.d_rope} must equal d_latent/heads = {self.head_dim}")
        if self.d_rope % 2:
            raise ConfigurationError(f"d_rope={self.d_rope} must be even for rotary pairs")


def causal_mask(n: int) -> np.ndarray:
    """Boolean ``n×n`` mask, true where key index exceeds query index."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


class MDLA(Module):
    """Latent attention usable for self (``x_kv is x_q``) or cross attention."""

    def __init__(self, rng: np.random.Generator, cfg: MdlaConfig):
        cfg.validate()
        self.cfg = cfg
        dm, dd, dl = cfg.d_model, cfg.down_dim, cfg.d_latent
        self.w_q_down = normal_init(rng, (dm, dd))
        self.w_k_down = normal_init(rng, (dm, dd))
        self.w_v_down = normal_init(rng, (dm, dd))
        self.q_norm = RMSNorm(dd)
        self.k_norm = RMSNorm(dd)
        self.v_norm = RMSNorm(dd)
        self.w_q_up = normal_init(rng, (dd, dl))
        self.w_k_up = normal_init(rng, (dd, dl))
        self.w_v_up = normal_init(rng, (dd, dl))
        self.w_out = normal_init(rng, (dl, dm))

    def rope_columns(self) -> np.ndarray:
        """Indices of the latent columns that feed the rotary branch."""
        c = self.cfg
        return np.concatenate([np.arange(h * c.head_dim + c.d_nope, (h + 1) * c.head_dim) for h in range(c.heads)])

    def project(self, x_q: Tensor, x_kv: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Latent ``Q, K, V`` of widths ``d_latent``."""
        dm = self.cfg.d_model
        if x_q.shape[-1] != dm or x_kv.shape[-1] != dm:
            raise DimensionError(f"MDLA expects feature width {dm}, got {x_q.shape} and {x_kv.shape}")
        q = ops.matmul(self.q_norm(ops.matmul(x_q, self.w_q_down)), self.w_q_up)
        k = ops.matmul(self.k_norm(ops.matmul(x_kv, self.w_k_down)), self.w_k_up)
        v = ops.matmul(self.v_norm(ops.matmul(x_kv, self.w_v_down)), self.w_v_up)
        return q, k, v

    def split_heads(self, x: Tensor) -> Tensor:
        """``[...,] s × d_latent`` -> ``[...,] h × s × head_dim``."""
        lead = x.shape[:-2]
        s = x.shape[-2]
        x = ops.reshape(x, lead + (s, self.cfg.heads, self.cfg.head_dim))
        n = len(lead)
        return ops.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def rotate_branch(self, x: Tensor, positions: np.ndarray) -> Tensor:
        """Keep the content columns, rotate the rotary columns of each head."""
        c = self.cfg
        if c.d_rope == 0:
            return x
        rot = ops.rope(x[..., c.d_nope:], positions, c.rope_base)
        if c.d_nope == 0:
            return rot
        return ops.concat([x[..., :c.d_nope], rot], axis=-1)

    def attend(self, q: Tensor, k: Tensor, v: Tensor, q_pos=None, k_pos=None,
               mask: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None,
               keep_probs: bool = False) -> tuple[Tensor, Optional[np.ndarray]]:
        """Scores, softmax, value mixing and output projection.

        ``mask`` is boolean and true where attention is forbidden; it must
        broadcast to ``[...,] h × s_q × s_kv``.
        """
        c = self.cfg
        s_q, s_kv = q.shape[-2], k.shape[-2]
        q_pos = np.arange(s_q) if q_pos is None else np.asarray(q_pos)
        k_pos = np.arange(s_kv) if k_pos is None else np.asarray(k_pos)
        if q_pos.shape[-1] != s_q or k_pos.shape[-1] != s_kv:
            raise DimensionError(f"positions {q_pos.shape}/{k_pos.shape} do not match lengths {s_q}/{s_kv}")
        qh = self.rotate_branch(self.split_heads(q), q_pos)
        kh = self.rotate_branch(self.split_heads(k), k_pos)
        vh = self.split_heads(v)
        scores = ops.mul(ops.matmul(qh, ops.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2))),
                         1.0 / np.sqrt(c.d_latent))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            try:
                np.broadcast_shapes(mask.shape, scores.shape)
            except ValueError as exc:
                raise DimensionError(f"mask {mask.shape} does not broadcast to scores {scores.shape}") from exc
            if mask.shape[-2:] != (s_q, s_kv) and mask.shape[-2:] != (1, s_kv):
                raise DimensionError(f"mask {mask.shape} does not match {s_q}x{s_kv} attention")
            scores = ops.masked_fill(scores, mask, MASK_VALUE)
        probs = ops.softmax(scores, axis=-1)
        kept = probs.data.copy() if keep_probs else None
        probs = ops.dropout(probs, c.attn_dropout, self.training, rng)
        z = ops.matmul(probs, vh)
        n = z.ndim - 3
        z = ops.transpose(z, tuple(range(n)) + (n + 1, n, n + 2))
        z = ops.reshape(z, z.shape[:-2] + (c.d_latent,))
        return ops.matmul(z, self.w_out), kept

    def __call__(self, x_q: Tensor, x_kv: Optional[Tensor] = None, q_pos=None, k_pos=None,
                 mask: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None,
                 keep_probs: bool = False) -> tuple[Tensor, Optional[np.ndarray]]:
        x_kv = x_q if x_kv is None else x_kv
        q, k, v = self.project(x_q, x_kv)
        return self.attend(q, k, v, q_pos, k_pos, mask, rng, keep_probs)
