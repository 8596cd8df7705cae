"""AdamW with parameter groups, a step-decay schedule and the training step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from micar.autodiff.params import ParamStore
from micar.autodiff.tensor import backward
from micar.errors import NonFiniteError
from micar.model import MicarVLMoE, teacher_forcing, total_loss

MSVE_PREFIX = "msve."


@dataclass
class AdamW:
    """Adam with decoupled weight decay and bias correction.

    Parameters whose path starts with ``MSVE_PREFIX`` use ``msve_lr``; the
    scheduler scales both learning rates by the same factor.
    """

    params: ParamStore
    lr: float = 1e-4
    msve_lr: float = 5e-5
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    lr_scale: float = 1.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in self.params:
            self.m.setdefault(name, np.zeros_like(self.params[name].data))
            self.v.setdefault(name, np.zeros_like(self.params[name].data))

    def group_lr(self, name: str) -> float:
        base = self.msve_lr if name.startswith(MSVE_PREFIX) else self.lr
        return base * self.lr_scale

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name in self.params:
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            lr = self.group_lr(name)
            p.data *= 1.0 - lr * self.weight_decay
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class StepLR:
    """Multiply the learning rates by ``gamma`` every ``step_epochs`` epochs."""

    optimizer: AdamW
    step_epochs: int
    gamma: float = 0.1

    def set_epoch(self, epoch: int) -> None:
        self.optimizer.lr_scale = self.gamma ** (epoch // max(self.step_epochs, 1))


def first_nonfinite_grad(params: ParamStore) -> Optional[str]:
    for name in params:
        g = params[name].grad
        if g is not None and not np.all(np.isfinite(g)):
            return name
    return None


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Dropout randomness for one step, a pure function of (seed, step) so runs resume exactly."""
    return np.random.default_rng([seed, step])


def train_step(model: MicarVLMoE, optimizer: AdamW, images: np.ndarray, ids: np.ndarray,
               rng: Optional[np.random.Generator] = None) -> dict:
    """One teacher-forced forward/backward/update on a batch; returns loss metrics."""
    model.train()
    inputs, targets = teacher_forcing(ids)
    out = model(images, inputs, rng=rng)
    loss = total_loss(out.logits, targets, out.lb, model.cfg.alpha)
    params = optimizer.params
    backward(loss.total, params.values())
    if not np.isfinite(loss.total.data):
        bad = first_nonfinite_grad(params)
        raise NonFiniteError(f"non-finite loss {float(loss.total.data)}; first non-finite gradient: {bad}")
    bad = first_nonfinite_grad(params)
    if bad is not None:
        raise NonFiniteError(f"non-finite gradient in parameter {bad}")
    optimizer.step()
    metrics = loss.as_floats()
    metrics["lr"] = optimizer.lr * optimizer.lr_scale
    return metrics
