"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(n), np.linalg.norm(a), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
              rng: np.random.Generator | None = None) -> list[float]:
    """Compare backward() against central differences for every input needing grad.

    Non-scalar outputs are contracted with a fixed random tensor first. Returns
    the relative error per checked input.
    """
    rng = rng or np.random.default_rng(0)
    probe = None

    def scalar() -> Tensor:
        nonlocal probe
        out = fn(*inputs)
        if out.size == 1:
            return out.reshape(())
        if probe is None:
            probe = Tensor(rng.normal(size=out.shape))
        return (out * probe).sum()

    for t in inputs:
        t.zero_grad()
    scalar().backward()
    errors = []
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numeric_grad(lambda: float(scalar().data), t.data, h)
        errors.append(relative_error(analytic, numeric))
    return errors
