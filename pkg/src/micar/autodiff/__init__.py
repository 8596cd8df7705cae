from micar.autodiff.tensor import Tape, Tensor, backward, grad_enabled, no_grad
from micar.autodiff.params import Module, ParamStore
from micar.autodiff import ops

__all__ = ["Tape", "Tensor", "backward", "grad_enabled", "no_grad", "Module", "ParamStore", "ops"]
