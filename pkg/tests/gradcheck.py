"""Central finite-difference oracle, independent of the tape engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from naturalize.tensor import Tape, Tensor


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(
    op: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator, h: float = 1e-6
) -> float:
    """Max relative error between tape gradients and finite differences of sum(op(*inputs) * R)."""
    tensors = [Tensor(x, requires_grad=True, dtype=np.float64) for x in inputs]
    probe_shape = op(*[Tensor(x, dtype=np.float64) for x in inputs]).shape
    proj = rng.standard_normal(probe_shape)

    with Tape() as tape:
        loss = (op(*tensors) * Tensor(proj)).sum()
    tape.backward(loss)

    worst = 0.0
    for t in tensors:

        def f() -> float:
            return float((op(*[Tensor(u.data) for u in tensors]).data * proj).sum())

        num = numeric_grad(f, t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst
