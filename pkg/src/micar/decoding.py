"""Greedy and beam-search report generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from micar.autodiff import ops
from micar.autodiff.tensor import Tensor, no_grad
from micar.data import EOS_ID, PAD_ID, SOS_ID, UNK_ID

# (batch of equal-length prefixes) -> log-probabilities of the next token, shape (batch, V)
StepFn = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass
class Beam:
    tokens: tuple[int, ...]
    logprob: float
    finished: bool = False

    @property
    def length(self) -> int:
        """Generated tokens, excluding the leading ``<sos>``."""
        return len(self.tokens) - 1

    def normalized(self) -> float:
        return self.logprob / max(self.length, 1)


def _mask_banned(logp: np.ndarray, banned: Iterable[int]) -> np.ndarray:
    banned = list(banned)
    if banned:
        logp = logp.copy()
        logp[:, banned] = -np.inf
    return logp


def greedy_decode(step: StepFn, max_len: int, banned: Iterable[int] = (PAD_ID, SOS_ID)) -> list[int]:
    seq = [SOS_ID]
    banned = list(banned)
    while len(seq) < max_len:
        logp = _mask_banned(np.asarray(step([seq])), banned)[0]
        tok = int(np.argmax(logp))
        seq.append(tok)
        if tok == EOS_ID:
            break
    return seq


def beam_search(step: StepFn, width: int = 3, max_len: int = 60,
                banned: Iterable[int] = (PAD_ID, SOS_ID)) -> list[int]:
    """Return the best ``<sos> ... [<eos>]`` sequence.

    Each step keeps the ``width`` best expansions of the active beams (score
    descending, ties by token sequence); expansions ending in ``<eos>`` leave
    the active set. The winner maximises log-probability / generated length
    over finished beams, plus active ones if ``max_len`` cut decoding short.
    """
    if width < 1:
        raise ValueError(f"beam width must be >= 1, got {width}")
    banned = list(banned)
    active = [Beam((SOS_ID,), 0.0)]
    finished: list[Beam] = []
    while active and len(active[0].tokens) < max_len:
        logp = _mask_banned(np.asarray(step([b.tokens for b in active]), dtype=np.float64), banned)
        total = np.array([b.logprob for b in active])[:, None] + logp
        flat = total.reshape(-1)
        finite = np.isfinite(flat)
        if not finite.any():
            break
        order = np.argsort(-flat, kind="stable")
        k = min(width, int(finite.sum()))
        cutoff = flat[order[k - 1]]
        pool = [int(i) for i in np.nonzero(flat >= cutoff)[0]]
        vocab = logp.shape[1]
        cands = [Beam(active[i // vocab].tokens + (i % vocab,), float(flat[i])) for i in pool]
        cands.sort(key=lambda b: (-b.logprob, b.tokens))
        active = []
        for b in cands[:k]:
            if b.tokens[-1] == EOS_ID:
                b.finished = True
                finished.append(b)
            else:
                active.append(b)
    pool = finished + active
    best = min(pool, key=lambda b: (-b.normalized(), b.tokens))
    return list(best.tokens)


class ModelStepper:
    """Adapts a trained model to :data:`StepFn` for one image (encoded once)."""

    def __init__(self, model, image: np.ndarray):
        self.model = model
        model.eval()
        with no_grad():
            self.memory = model.encode_image(Tensor(np.asarray(image)[None]))

    def __call__(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        ids = np.asarray(prefixes, dtype=np.int64)
        with no_grad():
            mem = Tensor(np.broadcast_to(self.memory.data, (len(ids),) + self.memory.shape[1:]))
            out = self.model.decode(mem, ids)
            return ops.log_softmax(out.logits[:, -1, :]).data


def generate(model, image: np.ndarray, width: int = 3, max_len: Optional[int] = None,
             ban_unk: bool = False) -> list[int]:
    banned = [PAD_ID, SOS_ID] + ([UNK_ID] if ban_unk else [])
    max_len = max_len or model.cfg.max_len
    return beam_search(ModelStepper(model, image), width, max_len, banned)
