"""Wall-clock scaling of linear versus softmax attention (forward + backward)."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .mixer import linear_attention_ridge, linear_attention_vanilla, softmax_attention_reference

KINDS = ("linear", "ridge", "softmax")


def _inputs(n: int, d: int, seed: int):
    rng = np.random.default_rng([seed, n, d])
    return [T.parameter(rng.normal(size=(1, n, d)) / np.sqrt(d)) for _ in range(3)]


def attention_output(kind: str, n: int, d: int = 32, seed: int = 0) -> np.ndarray:
    q, k, v = _inputs(n, d, seed)
    with T.no_grad():
        return _forward(kind, q, k, v).data


def _forward(kind, q, k, v):
    if kind == "linear":
        return linear_attention_vanilla(q, k, v)
    if kind == "ridge":
        return linear_attention_ridge(q, k, v, 1.0)
    if kind == "softmax":
        return softmax_attention_reference(q, k, v)
    raise ValueError(f"unknown attention kind {kind!r}; choose from {KINDS}")


def time_attention(kind: str, n: int, d: int = 32, repeats: int = 5, seed: int = 0) -> float:
    """Best-of-``repeats`` seconds for one forward and backward pass at ``n`` tokens."""
    q, k, v = _inputs(n, d, seed)
    cot = np.random.default_rng(seed + 1).normal(size=(1, n, d))
    best = float("inf")
    for _ in range(repeats):
        for t in (q, k, v):
            t.grad = None
        t0 = time.perf_counter()
        out = _forward(kind, q, k, v)
        T.backward(T.tsum(out * T.Tensor(cot)))
        best = min(best, time.perf_counter() - t0)
    return best


def sweep(sizes, kinds=("linear", "softmax"), d: int = 32, repeats: int = 5, seed: int = 0) -> list[tuple[int, str, float]]:
    return [(n, kind, time_attention(kind, n, d, repeats, seed)) for kind in kinds for n in sizes]


def scaling_ratio(rows, kind: str, n_lo: int, n_hi: int) -> float:
    t = {(n, k): s for n, k, s in rows}
    return t[(n_hi, kind)] / t[(n_lo, kind)]
