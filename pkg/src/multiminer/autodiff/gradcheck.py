"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int,
                   proj: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d/dx_index of ``sum(proj * fn(*arrays))`` by central differences."""
    base = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    with no_grad():
        for _ in it:
            i = it.multi_index
            orig = target[i]
            target[i] = orig + eps
            plus = float(np.sum(proj * fn(*[Tensor(a) for a in base]).data))
            target[i] = orig - eps
            minus = float(np.sum(proj * fn(*[Tensor(a) for a in base]).data))
            target[i] = orig
            grad[i] = (plus - minus) / (2 * eps)
    return grad


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray],
                    rng: np.random.Generator, eps: float = 1e-5) -> float:
    """Worst relative error between analytic and numeric gradients.

    The scalar probed is a random projection ``sum(R * fn(*inputs))``.
    Relative error is ``|a - n| / max(|a|, |n|)`` in the 2-norm, per input.
    """
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    worst = 0.0
    for k, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = numerical_grad(fn, arrays, k, proj, eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
