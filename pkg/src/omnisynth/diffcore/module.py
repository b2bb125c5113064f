"""Parameter containers for the autodiff core.

A Module owns named parameter tensors and child modules; ``named_params``
flattens the tree with dotted names, which is also the checkpoint naming
scheme. Initialization draws from a caller-provided ``numpy.random.Generator``
so training runs are reproducible end to end.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .conv import conv2d_circular
from .tensor import Tensor

__all__ = ["Module", "Linear", "Conv2dCircular"]


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.named_params(prefix + name + "."))
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        """Copy values into existing parameters; names and shapes must match."""
        params = self.named_params()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params().items()}


class Linear(Module):
    """Dense layer y = x @ W + b with He/Xavier init."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float32, init: str = "he", zero: bool = False):
        super().__init__()
        if zero:
            w = np.zeros((in_dim, out_dim))
        elif init == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, out_dim))
        else:
            bound = np.sqrt(6.0 / (in_dim + out_dim))
            w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.w = self.add_param("w", w.astype(dtype))
        self.b = self.add_param("b", np.zeros(out_dim, dtype=dtype))

    def __call__(self, x) -> Tensor:
        if isinstance(x, Tensor) and x.ndim == 2:
            return T.affine(x, self.w, self.b)
        return T.add(T.matmul(x, self.w), self.b)


class Conv2dCircular(Module):
    """3x3 (by default) conv with circular horizontal padding."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, dtype=np.float32,
                 init: str = "he", zero: bool = False):
        super().__init__()
        fan_in = in_ch * kernel * kernel
        if zero:
            w = np.zeros((out_ch, in_ch, kernel, kernel))
        elif init == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        else:  # variance-preserving, for linear skip paths
            w = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(out_ch, in_ch, kernel, kernel))
        self.w = self.add_param("w", w.astype(dtype))
        self.b = self.add_param("b", np.zeros(out_ch, dtype=dtype))
        self.stride = stride

    def __call__(self, x) -> Tensor:
        return conv2d_circular(x, self.w, self.b, stride=self.stride)
