"""Minimal tape-based tensor autograd.

A Tensor wraps a numpy array plus an optional gradient. Operations record
backward closures on the output; calling ``backward()`` on a scalar loss
walks the tape in reverse topological order and accumulates gradients into
every tensor reachable through ``requires_grad`` leaves.

Computation is float32 by default; gradient-check suites flip the process
default to float64 with ``use_dtype``. All forwards are deterministic:
identical inputs and parameters produce bitwise-identical outputs.
"""
from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shape disagreement between operands, naming the offending axis."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported default dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the process default dtype (e.g. float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (evaluation / rollouts)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """Dense n-dimensional array with an optional same-shape gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode sweep seeded at this (scalar) tensor."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Operator sugar for the handful of generic ops below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.asarray(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


def _attach(out: Tensor, parents: Sequence[Tensor], backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _attach(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _attach(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _attach(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul inner axis mismatch: {a.data.shape[-1]} (lhs last) vs {b.data.shape[0]} (rhs first)"
        )
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            if a.data.ndim == 2 and b.data.ndim == 1:
                _accumulate(a, np.outer(g, b.data))
            elif a.data.ndim == 1 and b.data.ndim == 1:
                _accumulate(a, g * b.data)
            else:
                _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            if a.data.ndim == 1 and b.data.ndim == 2:
                _accumulate(b, np.outer(a.data, g))
            elif a.data.ndim == 1 and b.data.ndim == 1:
                _accumulate(b, g * a.data)
            else:
                _accumulate(b, a.data.T @ g)

    return _attach(out, (a, b), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0

    def bwd(g):
        _accumulate(x, g * mask)

    return _attach(out, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s)

    def bwd(g):
        _accumulate(x, g * s * (1.0 - s))

    return _attach(out, (x,), bwd)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    out = Tensor(t)

    def bwd(g):
        _accumulate(x, g * (1.0 - t * t))

    return _attach(out, (x,), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return _attach(out, (x,), bwd)


def flatten(x) -> Tensor:
    """(N, ...) -> (N, prod(rest))."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def concat(parts: Iterable, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(sl)])

    return _attach(out, tuple(parts), bwd)


def mean(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))
    axes = tuple(sorted(a % x.ndim for a in axes))
    out = Tensor(x.data.mean(axis=axes))
    count = int(np.prod([x.shape[a] for a in axes]))

    def bwd(g):
        ge = np.expand_dims(g, axes) if g.ndim < x.ndim else g
        _accumulate(x, np.broadcast_to(ge / count, x.shape))

    return _attach(out, (x,), bwd)


def tsum(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim))
    axes = tuple(sorted(a % x.ndim for a in axes))
    out = Tensor(x.data.sum(axis=axes))

    def bwd(g):
        ge = np.expand_dims(g, axes) if g.ndim < x.ndim else g
        _accumulate(x, np.broadcast_to(ge, x.shape).astype(x.data.dtype))

    return _attach(out, (x,), bwd)


def assert_finite(x: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values in {what}")
