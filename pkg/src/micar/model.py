"""Full image-to-report model: vision encoder, latent encoder, MoE decoder, vocabulary head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from micar.attention import MDLA, MdlaConfig, causal_mask
from micar.autodiff import ops
from micar.autodiff.params import Module, init_std
from micar.autodiff.tensor import Tensor
from micar.errors import ConfigurationError, ContractError, DimensionError
from micar.fusion import GatedFusion, MixtureOfExperts, RoutingTrace
from micar.layers import Linear, RMSNorm
from micar.transformer import LatentEncoder, ReportEmbedding
from micar.vision import BackboneConfig, MultiscaleVisionEncoder, SingleScaleEncoder

PAD_ID = 0


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the full-size model."""

    in_channels: int = 3
    base_channels: int = 8
    blocks_per_stage: int = 1
    d_v: int = 32
    d_p: Optional[int] = None
    grid: int = 4
    msve: bool = True
    d_model: int = 512
    d_latent: int = 768
    heads: int = 8
    d_nope: int = 48
    d_rope: int = 48
    rope_base: float = 10000.0
    d_ff: int = 2048
    n_enc: int = 3
    n_dec: int = 3
    n_experts: int = 8
    top_k: int = 2
    alpha: float = 0.01
    vocab_size: int = 64
    max_len: int = 60
    attn_dropout: float = 0.12
    block_dropout: float = 0.1
    activation: str = "silu"
    rms_eps: float = 1e-6
    init_std: Optional[float] = 0.02

    def mdla(self) -> MdlaConfig:
        return MdlaConfig(self.d_model, self.d_latent, self.heads, self.d_nope, self.d_rope,
                          self.attn_dropout, self.rope_base)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.in_channels, self.base_channels, self.blocks_per_stage)

    def validate(self) -> None:
        self.mdla().validate()
        if self.n_enc < 1 or self.n_dec < 1:
            raise ConfigurationError(f"n_enc and n_dec must be >= 1, got {self.n_enc}, {self.n_dec}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigurationError(f"need 1 <= top_k <= n_experts, got {self.top_k}, {self.n_experts}")
        if self.activation not in ops.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.vocab_size < 5:
            raise ConfigurationError("vocab_size must leave room for the 4 reserved tokens")
        if self.init_std is not None and self.init_std <= 0:
            raise ConfigurationError(f"init_std must be positive or null, got {self.init_std}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class DecoderLayerOutput:
    hidden: Tensor
    lb: Tensor
    routing: RoutingTrace
    self_attn_map: Optional[np.ndarray] = None
    cross_attn_map: Optional[np.ndarray] = None


class DecoderBlock(Module):
    """``H_sa = MDLA(RN(X)) + X``; ``H_gf = GF(H_sa, I) + H_sa``; ``H = MoE(RN(H_gf)) + H_gf``."""

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig):
        m = cfg.mdla()
        self.norm_sa = RMSNorm(cfg.d_model, cfg.rms_eps)
        self.self_attn = MDLA(rng, m)
        self.fusion = GatedFusion(rng, m, cfg.activation, cfg.rms_eps)
        self.norm_moe = RMSNorm(cfg.d_model, cfg.rms_eps)
        self.moe = MixtureOfExperts(rng, cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.top_k, cfg.activation)
        self.block_dropout = cfg.block_dropout

    def __call__(self, x: Tensor, image: Tensor, mask: Optional[np.ndarray] = None, text_pos=None,
                 image_pos=None, token_mask: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None, trace: bool = False,
                 tokens: Optional[Sequence[str]] = None) -> DecoderLayerOutput:
        s_t = x.shape[-2]
        if mask is None:
            mask = causal_mask(s_t)
        if mask.shape[-2:] != (s_t, s_t):
            raise DimensionError(f"causal mask {mask.shape} does not match sequence length {s_t}")
        sa, sa_map = self.self_attn(self.norm_sa(x), q_pos=text_pos, k_pos=text_pos, mask=mask, rng=rng,
                                    keep_probs=trace)
        h_sa = ops.add(ops.dropout(sa, self.block_dropout, self.training, rng), x)
        gf, ca_map = self.fusion(h_sa, image, q_pos=text_pos, k_pos=image_pos, rng=rng, keep_probs=trace)
        h_gf = ops.add(ops.dropout(gf, self.block_dropout, self.training, rng), h_sa)
        moe, lb, routing = self.moe(self.norm_moe(h_gf), token_mask, tokens)
        h = ops.add(ops.dropout(moe, self.block_dropout, self.training, rng), h_gf)
        return DecoderLayerOutput(h, lb, routing, sa_map, ca_map)


@dataclass
class ForwardOutput:
    logits: Tensor
    lb: list[Tensor]
    layers: list[DecoderLayerOutput] = field(default_factory=list)

    @property
    def traces(self) -> list[RoutingTrace]:
        return [layer.routing for layer in self.layers]


class MicarVLMoE(Module):
    """Image + teacher-forced token prefix -> next-token logits.

    Works on single examples (``3×H×W`` image, ``s_t`` ids) or batches
    (``N×3×H×W``, ``N×s_t``); logits at position t score token t+1.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        with init_std(cfg.init_std):
            self._build(rng, cfg)

    def _build(self, rng: np.random.Generator, cfg: ModelConfig) -> None:
        if cfg.msve:
            self.msve = MultiscaleVisionEncoder(rng, cfg.backbone(), cfg.d_v, cfg.d_model, cfg.grid, cfg.d_p)
        else:
            self.msve = SingleScaleEncoder(rng, cfg.backbone(), cfg.d_v, cfg.d_model, cfg.grid)
        self.encoder = LatentEncoder(rng, cfg.mdla(), cfg.d_ff, cfg.n_enc, cfg.activation, cfg.block_dropout,
                                     cfg.rms_eps)
        self.embed = ReportEmbedding(rng, cfg.vocab_size, cfg.d_model, cfg.max_len)
        self.decoder = [DecoderBlock(rng, cfg) for _ in range(cfg.n_dec)]
        self.final_norm = RMSNorm(cfg.d_model, cfg.rms_eps)
        self.head = Linear(rng, cfg.d_model, cfg.vocab_size)

    def encode_image(self, image, rng: Optional[np.random.Generator] = None) -> Tensor:
        image = image if isinstance(image, Tensor) else Tensor(image)
        patches = self.msve(image)
        return self.encoder(patches, np.arange(patches.shape[-2]), rng)

    def decode(self, memory: Tensor, tokens, token_mask: Optional[np.ndarray] = None,
               rng: Optional[np.random.Generator] = None, trace: bool = False,
               token_labels: Optional[Sequence[str]] = None) -> ForwardOutput:
        tokens = np.asarray(tokens, dtype=np.int64)
        s_t = tokens.shape[-1]
        if s_t > self.cfg.max_len:
            raise ContractError(f"token length {s_t} exceeds max_len {self.cfg.max_len}")
        if token_mask is None:
            token_mask = tokens != PAD_ID
        x = ops.dropout(self.embed(tokens), self.cfg.block_dropout, self.training, rng)
        text_pos = np.arange(s_t)
        image_pos = np.arange(memory.shape[-2])
        mask = causal_mask(s_t)
        layers = []
        for block in self.decoder:
            out = block(x, memory, mask, text_pos, image_pos, token_mask, rng, trace, token_labels)
            layers.append(out)
            x = out.hidden
        logits = self.head(self.final_norm(x))
        return ForwardOutput(logits, [layer.lb for layer in layers], layers)

    def __call__(self, image, tokens, token_mask: Optional[np.ndarray] = None,
                 rng: Optional[np.random.Generator] = None, trace: bool = False,
                 token_labels: Optional[Sequence[str]] = None) -> ForwardOutput:
        memory = self.encode_image(image, rng)
        return self.decode(memory, tokens, token_mask, rng, trace, token_labels)


@dataclass
class LossParts:
    total: Tensor
    lang: Tensor
    balance: Tensor
    tokens: int

    def as_floats(self) -> dict:
        return {"L_total": float(self.total.data), "L_lang": float(self.lang.data),
                "L_balance": float(self.balance.data), "tokens": self.tokens}


def teacher_forcing(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``<sos> w1 .. wn <eos> <pad>..`` into decoder inputs and next-token targets."""
    ids = np.asarray(ids, dtype=np.int64)
    return ids[..., :-1], ids[..., 1:]


def total_loss(logits: Tensor, targets: np.ndarray, lb_per_layer: Sequence[Tensor], alpha: float,
               pad_id: int = PAD_ID) -> LossParts:
    """``L_lang + alpha * mean_n(L_b^n)``.

    ``L_lang`` sums token negative log-likelihoods over non-pad targets of a
    sequence; a batch contributes the mean of its per-sequence sums.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = (targets != pad_id).astype(np.float64)
    n_tok = int(weights.sum())
    if n_tok == 0:
        raise ContractError("all target positions are padding")
    nll = ops.cross_entropy(logits, targets, weights)
    per_seq = ops.sum(nll, axis=-1)
    lang = ops.mean(per_seq) if per_seq.ndim else per_seq
    balance = ops.mul(ops.sum(ops.concat([ops.reshape(lb, (1,)) for lb in lb_per_layer], axis=0)),
                      1.0 / len(lb_per_layer))
    return LossParts(ops.add(lang, ops.mul(balance, alpha)), lang, balance, n_tok)
