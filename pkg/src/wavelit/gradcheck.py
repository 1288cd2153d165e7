"""Central finite-difference oracle for checking tape gradients.

Only the forward function is evaluated here, so the reference is independent
of every backward rule it is used to check.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b||_2 / max(||a||_2, ||b||_2); 0 when both vanish."""
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / den)


def numerical_grad(
    fn: Callable[[], Tensor],
    t: Tensor,
    h: float = 1e-5,
    indices: Sequence[tuple] | None = None,
) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``t``.

    ``t.data`` is perturbed in place and restored. If ``indices`` is given only
    those entries are probed and the rest of the returned array is zero.
    """
    t.data = np.array(t.data, dtype=np.float64)
    out = np.zeros_like(t.data)
    it = indices if indices is not None else list(np.ndindex(t.shape))
    with no_grad():
        for idx in it:
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = float(fn().data)
            t.data[idx] = orig - h
            fm = float(fn().data)
            t.data[idx] = orig
            out[idx] = (fp - fm) / (2 * h)
    return out


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between tape and finite-difference gradients.

    With ``max_entries`` set, each tensor is probed on a random subset of that
    many entries and compared on that subset only.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        all_idx = list(np.ndindex(t.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            idx = [all_idx[i] for i in sorted(pick)]
        else:
            idx = all_idx
        num = numerical_grad(fn, t, h, idx)
        sel = tuple(np.array(idx).T) if t.ndim else ()
        a = analytic[sel] if t.ndim else analytic
        n = num[sel] if t.ndim else num
        worst = max(worst, relative_error(np.ravel(a), np.ravel(n)))
    return worst
