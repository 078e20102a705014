"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` whose ``_parents`` and
``_backward`` record how to push an upstream gradient to its inputs.  Calling
:meth:`Tensor.backward` on a scalar walks that graph once in reverse
topological order and then releases it, so a tape supports one backward pass.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import NumericError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """An n-dimensional float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "",
                 _parents: Sequence["Tensor"] = (), _backward: Optional[Callable] = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, f"tensor {name or '<anon>'}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph construction ------------------------------------------------
    @staticmethod
    def _result(data: np.ndarray, parents: Iterable["Tensor"], backward: Callable,
                what: str) -> "Tensor":
        parents = tuple(parents)
        _check_finite(data, what)
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = needs
        out._parents = parents if needs else ()
        out._backward = backward if needs else None
        out.name = ""
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Reverse sweep from this tensor; scalar outputs default to seed 1."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node.grad is not None:
                _check_finite(node.grad, "gradient")
            # tape is single-use
            if node._backward is not None:
                node._backward = None
                node._parents = ()

    # -- operator sugar (implemented in ops) --------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.divide(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.divide(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """A trainable leaf tensor; ``frozen`` parameters never move in updates."""

    __slots__ = ("frozen",)

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.frozen = frozen

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def sgd_step(params: Sequence[Parameter], lr: float, weight_decay: float = 0.0) -> None:
    """Plain SGD with L2 weight decay: ``p <- p - lr * (grad + wd * p)``.

    Gradients of every listed parameter are cleared afterwards, frozen or not.
    Raises ``ValueError`` if a trainable parameter has no gradient.
    """
    for p in params:
        if not p.frozen and p.grad is None:
            raise ValueError(f"parameter {p.name or '<anon>'} has no gradient")
    for p in params:
        if not p.frozen and lr != 0.0:
            step = p.grad + weight_decay * p.data if weight_decay else p.grad
            p.data -= lr * step
            _check_finite(p.data, f"parameter {p.name}")
        p.grad = None
