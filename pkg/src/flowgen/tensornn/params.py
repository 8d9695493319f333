"""Named parameter collections and initialization helpers."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, gather, layer_norm, matmul, add, mul

DEFAULT_DTYPE = np.float32


class ParamSet:
    """Ordered name -> Tensor map holding trainable parameters.

    Names are unique and iteration order is insertion order, which keeps
    checkpoints and optimizer state deterministic.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def values(self):
        return self._tensors.values()

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Collect gradients; missing gradients map to None."""
        return {name: t.grad for name, t in self._tensors.items()}

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy())
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for name, t in self._tensors.items():
            out.add(name, t.data.astype(dtype))
        return out

    def subset(self, predicate) -> "ParamSet":
        """View over parameters whose name satisfies ``predicate``; tensors
        are shared, so optimizer updates through the view mutate the originals."""
        out = ParamSet()
        for name, t in self._tensors.items():
            if predicate(name):
                out._tensors[name] = t
        return out

    def load_values(self, other: "ParamSet"):
        """Copy values from a shape-identical ParamSet in place."""
        for name, t in self._tensors.items():
            src = other[name]
            if src.data.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name}: {src.data.shape} vs {t.data.shape}")
            t.data[...] = src.data


# -- initializers ------------------------------------------------------------

def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(DEFAULT_DTYPE)


def embedding_init(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return (rng.standard_normal((rows, dim)) * 0.02).astype(DEFAULT_DTYPE)


# -- layer helpers ------------------------------------------------------------

def init_linear(ps: ParamSet, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
    ps.add(f"{name}.w", linear_init(rng, fan_in, fan_out))
    ps.add(f"{name}.b", np.zeros(fan_out, dtype=DEFAULT_DTYPE))


def linear(ps: ParamSet, name: str, x: Tensor) -> Tensor:
    return add(matmul(x, ps[f"{name}.w"]), ps[f"{name}.b"])


def init_layernorm(ps: ParamSet, name: str, dim: int):
    ps.add(f"{name}.g", np.ones(dim, dtype=DEFAULT_DTYPE))
    ps.add(f"{name}.b", np.zeros(dim, dtype=DEFAULT_DTYPE))


def layernorm(ps: ParamSet, name: str, x: Tensor) -> Tensor:
    return add(mul(layer_norm(x), ps[f"{name}.g"]), ps[f"{name}.b"])


def init_embedding(ps: ParamSet, name: str, rows: int, dim: int, rng: np.random.Generator):
    ps.add(name, embedding_init(rng, rows, dim))


def embedding(ps: ParamSet, name: str, index) -> Tensor:
    return gather(ps[name], index)
