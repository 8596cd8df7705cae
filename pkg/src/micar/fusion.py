"""Context-gated cross-modal fusion and the top-k mixture-of-experts layer."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from micar.attention import MDLA, MdlaConfig
from micar.autodiff import ops
from micar.autodiff.params import Module, normal_init
from micar.autodiff.tensor import Tensor
from micar.errors import ConfigurationError, ContractError, DimensionError
from micar.layers import Linear, RMSNorm
from micar.transformer import GatedFFN


@dataclass
class FusionParts:
    """Intermediate values of one gated-fusion call (numpy copies for inspection)."""

    x_norm: np.ndarray
    att_norm: np.ndarray
    gate: np.ndarray
    f_gated: np.ndarray
    context: np.ndarray


class GatedFusion(Module):
    """Fuse text features with image patches.

    ``I_att = MDLA(RN(X), RN(I)) + X``; a sigmoid gate blends ``RN(I_att)``
    with ``RN(X)`` per token and channel; a pooled global image context
    ``G = W_g [mean(RN(I)); max(RN(I))] + b_g`` joins both in one affine map,
    whose output is added back to ``I_att``.
    """

    def __init__(self, rng: np.random.Generator, cfg: MdlaConfig, activation: str = "silu", eps: float = 1e-6):
        d = cfg.d_model
        self.image_norm = RMSNorm(d, eps)
        self.text_norm = RMSNorm(d, eps)
        self.att_norm = RMSNorm(d, eps)
        self.cross = MDLA(rng, cfg)
        self.context = Linear(rng, 2 * d, d)
        self.gate_hidden = Linear(rng, 2 * d, d)
        self.gate_out = Linear(rng, d, d)
        self.fuse = Linear(rng, 3 * d, d)
        self.activation = activation

    def __call__(self, x: Tensor, image: Tensor, q_pos=None, k_pos=None,
                 rng: Optional[np.random.Generator] = None, keep_probs: bool = False,
                 parts: Optional[list] = None) -> tuple[Tensor, Optional[np.ndarray]]:
        if image.shape[-2] == 0:
            raise ContractError("gated fusion needs at least one image row for pooling")
        if x.shape[-1] != image.shape[-1]:
            raise DimensionError(f"text {x.shape} and image {image.shape} widths differ")
        i_norm = self.image_norm(image)
        x_norm = self.text_norm(x)
        att, probs = self.cross(x_norm, i_norm, q_pos=q_pos, k_pos=k_pos, rng=rng, keep_probs=keep_probs)
        i_att = ops.add(att, x)
        pooled = ops.concat([ops.mean(i_norm, axis=-2, keepdims=True), ops.max(i_norm, axis=-2, keepdims=True)])
        g = self.context(pooled)
        act = ops.ACTIVATIONS[self.activation]
        att_n = self.att_norm(i_att)
        gate = ops.sigmoid(self.gate_out(act(self.gate_hidden(ops.concat([att_n, x_norm])))))
        f_gated = ops.add(ops.mul(gate, att_n), ops.mul(ops.sub(1.0, gate), x_norm))
        g_tokens = ops.broadcast_to(g, i_att.shape)
        z = ops.add(self.fuse(ops.concat([f_gated, i_att, g_tokens])), i_att)
        if parts is not None:
            parts.append(FusionParts(x_norm.data.copy(), att_n.data.copy(), gate.data.copy(),
                                     f_gated.data.copy(), g.data.copy()))
        return z, probs


@dataclass
class RoutingTrace:
    """One MoE layer's routing decisions over a flat list of tokens."""

    scores: np.ndarray
    indices: np.ndarray
    lb: float
    tokens: Optional[list[str]] = None
    layer: int = 0

    @property
    def n_experts(self) -> int:
        return self.scores.shape[1]

    @property
    def top_k(self) -> int:
        return self.indices.shape[1]

    def counts(self) -> np.ndarray:
        return np.bincount(self.indices.reshape(-1), minlength=self.n_experts)


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row; ties go to the lower index."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def load_balance(mean_scores: Tensor) -> Tensor:
    """``sum_e s_e log s_e`` over mean expert probabilities (0 log 0 = 0)."""
    return ops.sum(ops.xlogx(mean_scores))


class MixtureOfExperts(Module):
    """Softmax router over ``E`` gated-FFN experts; each token uses its top ``k``.

    Selected expert outputs are weighted by the raw softmax scores (no
    renormalisation). Only tokens routed to an expert are passed through it.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int, n_experts: int = 8, top_k: int = 2,
                 activation: str = "silu"):
        if not 1 <= top_k <= n_experts:
            raise ConfigurationError(f"need 1 <= k <= E, got k={top_k}, E={n_experts}")
        self.router = normal_init(rng, (d_model, n_experts), 0.02)
        self.experts = [GatedFFN(rng, d_model, d_ff, activation) for _ in range(n_experts)]
        self.top_k = top_k
        self.expert_rows = np.zeros(n_experts, dtype=np.int64)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def route(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        """Softmax scores ``S`` and top-k indices for a ``M×d`` token matrix."""
        scores = ops.softmax(ops.matmul(x, self.router), axis=-1)
        return scores, top_k_indices(scores.data, self.top_k)

    def __call__(self, x: Tensor, token_mask: Optional[np.ndarray] = None,
                 tokens: Optional[Sequence[str]] = None) -> tuple[Tensor, Tensor, RoutingTrace]:
        shape = x.shape
        flat = ops.reshape(x, (-1, shape[-1]))
        m = flat.shape[0]
        scores, idx = self.route(flat)
        valid = np.arange(m) if token_mask is None else np.nonzero(np.asarray(token_mask).reshape(-1))[0]
        if valid.size == 0:
            raise ContractError("MoE load balance needs at least one unmasked token")
        used = scores if valid.size == m else ops.index_select(scores, valid)
        lb = load_balance(ops.mean(used, axis=0))
        out = Tensor(np.zeros((m, shape[-1])))
        for e, expert in enumerate(self.experts):
            rows = np.nonzero((idx == e).any(axis=1))[0]
            if rows.size == 0:
                continue
            self.expert_rows[e] += rows.size
            y = expert(ops.index_select(flat, rows))
            w = ops.index_select(scores, rows)[:, e:e + 1]
            out = ops.index_add(out, rows, ops.mul(y, w))
        trace = RoutingTrace(scores.data[valid].copy(), idx[valid].copy(), float(lb.data),
                             list(tokens) if tokens is not None else None)
        return ops.reshape(out, shape), lb, trace


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_routing_artifacts(trace: RoutingTrace, directory, prefix: str = "routing") -> list[Path]:
    """Write score heatmap, per-expert counts and token->expert CSVs; returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_tok, n_exp = trace.scores.shape
    labels = trace.tokens if trace.tokens is not None else [str(i) for i in range(n_tok)]
    if len(labels) != n_tok:
        raise DimensionError(f"{len(labels)} token labels for {n_tok} routed tokens")
    heat = directory / f"{prefix}_scores.csv"
    counts = directory / f"{prefix}_counts.csv"
    assign = directory / f"{prefix}_assignments.csv"
    with open(heat, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["token"] + [f"e{e}" for e in range(n_exp)])
        for label, row in zip(labels, trace.scores):
            w.writerow([label] + [_fmt(v) for v in row])
    with open(counts, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["expert", "count"])
        for e, c in enumerate(trace.counts()):
            w.writerow([f"e{e}", int(c)])
    with open(assign, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "token"] + [f"rank{r}" for r in range(trace.top_k)])
        for pos, (label, row) in enumerate(zip(labels, trace.indices)):
            w.writerow([pos, label] + [f"e{int(e)}" for e in row])
    return [heat, counts, assign]


def read_score_heatmap(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return [r[0] for r in rows[1:]], np.array([[float(v) for v in r[1:]] for r in rows[1:]])
