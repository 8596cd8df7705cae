"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from micar.autodiff.tensor import Tensor, backward, no_grad


def rel_error(analytic, numeric) -> np.ndarray:
    """``|analytic - numeric| / max(1, |numeric|)`` elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def _eval(fn: Callable[[], Tensor]) -> float:
    with no_grad():
        return float(np.sum(fn().data))


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-4,
                       indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of ``sum(fn())`` w.r.t. entries of ``tensor``.

    ``fn`` must read ``tensor.data`` at call time. Entries outside ``indices``
    are left at zero.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    if indices is None:
        positions = range(flat.size)
    else:
        positions = [np.ravel_multi_index(ix, tensor.shape) for ix in indices]
    gflat = grad.reshape(-1)
    for k in positions:
        orig = flat[k]
        flat[k] = orig + eps
        fp = _eval(fn)
        flat[k] = orig - eps
        fm = _eval(fn)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * eps)
    return grad


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
             seed: int = 0) -> float:
    """Worst relative error of every input gradient of ``sum(fn(*inputs) * w)``.

    A fixed random weighting ``w`` makes the scalar depend on every output
    entry individually.
    """
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    w = np.random.default_rng(seed).normal(size=out.shape)

    def scalar():
        return (fn(*tensors) * w).sum()

    loss = scalar()
    backward(loss, tensors)
    worst = 0.0
    for t in tensors:
        num = numerical_gradient(scalar, t, eps)
        worst = max(worst, float(rel_error(t.grad, num).max(initial=0.0)))
    return worst


@dataclass
class GradCheckRow:
    name: str
    checked: int
    worst_error: float
    worst_index: tuple

    def passed(self, tol: float) -> bool:
        return self.worst_error < tol


def check_parameters(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-4,
                     max_entries: Optional[int] = 8, directions: int = 1,
                     seed: int = 0) -> list[GradCheckRow]:
    """Compare backprop gradients of ``loss_fn`` with central differences.

    Each parameter tensor gets up to ``max_entries`` randomly sampled
    coordinates (all of them when ``None``) plus ``directions`` random
    directional derivatives that touch every entry at once.
    """
    rng = np.random.default_rng(seed)
    names = list(params)
    tensors = [params[n] for n in names]
    backward(loss_fn(), tensors)
    analytic = {n: params[n].grad.copy() for n in names}
    rows = []
    for name in names:
        t = params[name]
        if max_entries is None or t.size <= max_entries:
            flat_idx = np.arange(t.size)
        else:
            flat_idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        indices = [np.unravel_index(k, t.shape) for k in flat_idx]
        num = numerical_gradient(loss_fn, t, eps, indices)
        errs = rel_error(analytic[name].reshape(-1)[flat_idx], num.reshape(-1)[flat_idx])
        worst = float(errs.max(initial=0.0))
        worst_ix = tuple(int(i) for i in indices[int(errs.argmax())]) if len(errs) else ()
        for _ in range(directions):
            v = rng.normal(size=t.shape)
            v /= np.linalg.norm(v) or 1.0
            orig = t.data.copy()
            t.data[...] = orig + eps * v
            fp = _eval(loss_fn)
            t.data[...] = orig - eps * v
            fm = _eval(loss_fn)
            t.data[...] = orig
            d_num = (fp - fm) / (2.0 * eps)
            d_an = float(np.sum(analytic[name] * v))
            err = float(rel_error(d_an, d_num))
            if err > worst:
                worst, worst_ix = err, ("direction",)
        rows.append(GradCheckRow(name, len(flat_idx) + directions, worst, worst_ix))
    return rows
