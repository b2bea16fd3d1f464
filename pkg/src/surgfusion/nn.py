"""Parameter containers shared by the model modules."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def param(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Tree of named parameters and buffers with a train/eval flag.

    Child modules, parameters (``Tensor`` with ``requires_grad``) and
    buffers (plain ``np.ndarray`` listed in ``_buffers``) are discovered
    from instance attributes; lists of modules are walked too.
    """

    _buffers: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if isinstance(val, (Module, Tensor)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield f"{key}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            if isinstance(val, Tensor):
                yield prefix + key, val
            else:
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield prefix + key, getattr(self, key)
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.named_parameters()}
        state.update({k: b.copy() for k, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for k, b in buffers.items():
            b[...] = state[k]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, val in self._children():
            if isinstance(val, Module):
                val.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x W + b`` on the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        super().__init__()
        w = np.zeros((d_in, d_out)) if zero else init_uniform(rng, (d_in, d_out), d_in)
        self.weight = param(w, "weight")
        self.bias = param(np.zeros(d_out), "bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(T.reshape(x, (1, -1)), self.weight)
        if x.ndim < 2:
            y = T.reshape(y, (-1,))
        return y if self.bias is None else T.add(y, self.bias)
