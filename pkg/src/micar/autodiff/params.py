"""Parameter containers: a lexicographically ordered store and a module base."""

from __future__ import annotations

from collections.abc import Mapping
from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np

from micar.autodiff.tensor import Tensor


class ParamStore(Mapping):
    """Dot-path name -> trainable Tensor, iterated in lexicographic order."""

    def __init__(self, items=()):
        self._items: dict[str, Tensor] = {}
        for name, t in dict(items).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._items:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._items[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._items))

    def __len__(self) -> int:
        return len(self._items)

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._items.values()))


DEFAULT_INIT_STD = 0.02
_init_std: list = [DEFAULT_INIT_STD]


@contextmanager
def init_std(std: Optional[float]):
    """Default std for :func:`normal_init` inside the block; ``None`` means ``1/sqrt(fan_in)``."""
    _init_std.append(std)
    try:
        yield
    finally:
        _init_std.pop()


def normal_init(rng: np.random.Generator, shape, std: Optional[float] = None) -> Tensor:
    """Gaussian weights for an ``in × out`` matrix (or a table, rows first).

    Without an explicit ``std`` the active :func:`init_std` applies, falling back
    to ``1/sqrt(shape[0])`` when that is ``None``.
    """
    if std is None:
        std = _init_std[-1]
    if std is None:
        std = float(shape[0]) ** -0.5
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Attribute-registered parameters, buffers and submodules.

    Trainable tensors are any ``Tensor`` attribute with ``requires_grad``;
    buffers are numpy arrays listed in ``_buffer_names``.
    """

    training: bool = True
    _buffer_names: tuple[str, ...] = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in sorted(vars(self).items()):
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{path}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in sorted(vars(self).items()):
            path = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(path + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_buffers(f"{path}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in sorted(vars(self).items()):
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for m in value:
                    yield from m.modules()

    def params(self) -> ParamStore:
        return ParamStore(self.named_parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)
