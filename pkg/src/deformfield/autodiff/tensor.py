"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is a tape of ``Node`` records built implicitly as ops execute;
it is rebuilt from scratch on every forward pass (no graph reuse).
Calling ``backward()`` twice on the same loss recomputes gradients from
scratch and *overwrites* leaf ``.grad`` fields, so repeated calls yield
identical (not accumulated) gradients.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Raised when operand shapes do not conform for an op."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {[tuple(s) for s in shapes]}")


class NonFiniteError(AutodiffError):
    pass


_state = threading.local()


def _tls():
    if not hasattr(_state, "grad_enabled"):
        _state.grad_enabled = True
        _state.dtype = np.float32
        _state.strict = False
    return _state


def grad_enabled() -> bool:
    return _tls().grad_enabled


@contextmanager
def no_grad():
    s = _tls()
    prev = s.grad_enabled
    s.grad_enabled = False
    try:
        yield
    finally:
        s.grad_enabled = prev


def default_dtype():
    return _tls().dtype


def set_precision(mode: str):
    """Global precision switch: 'single' (training) or 'double' (verification)."""
    if mode not in ("single", "double"):
        raise ValueError(f"unknown precision {mode!r}")
    _tls().dtype = np.float64 if mode == "double" else np.float32


@contextmanager
def precision(mode: str):
    s = _tls()
    prev = s.dtype
    set_precision(mode)
    try:
        yield
    finally:
        s.dtype = prev


def set_strict(flag: bool):
    """When on, ops raise NonFiniteError on non-finite inputs."""
    _tls().strict = bool(flag)


def strict_mode() -> bool:
    return _tls().strict


class Node:
    """One tape record: the op name, parent tensors and the backward rule."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """Dense n-d array participating in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}, data={self.data!r})"

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- operators (implementations live in functional.py) -------------------

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __pow__(self, p):
        from . import functional as F
        return F.power(self, p)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, idx):
        from . import functional as F
        return F.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        return F.transpose(self, axes or None)

    # -- backward ------------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar loss to every reachable leaf.

        Leaf gradients are assigned, not accumulated: a second call on
        the same graph reproduces the exact same ``.grad`` arrays.
        """
        if self.size != 1:
            raise AutodiffError(f"backward() requires a scalar loss, got shape {self.shape}")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen and (p.requires_grad or p.node is not None):
                        stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g.reshape(t.data.shape)
                continue
            parent_grads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, parent_grads):
                if pg is None or not (p.requires_grad or p.node is not None):
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def make_op(op_name, out_data, parents, backward_fn) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are needed."""
    if strict_mode() and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op_name}: non-finite output in strict mode")
    req = any(p.requires_grad or p.node is not None for p in parents)
    out = Tensor(out_data, dtype=out_data.dtype)
    if grad_enabled() and req:
        out.requires_grad = True
        out.node = Node(op_name, tuple(parents), backward_fn)
    return out


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor marked as learnable."""
    return Tensor(data, requires_grad=True, dtype=dtype)
