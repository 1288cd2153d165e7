"""Autoregressive rollout, per-step error accumulation and the geometric bound.

With a one-step error ``eps = sup ||F(x) - f(x)||`` and a Lipschitz constant
``L`` for the learned map ``F``, the rollout error obeys
``E_{n+1} <= eps + L * E_n`` and hence
``E_n <= eps * (L**n - 1) / (L - 1)`` (``n * eps`` when ``L == 1``).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .objectives import vrmse
from .tensor import no_grad

DEFAULT_WINDOWS = {"one_step": (1, 1), "t1_20": (1, 20), "t21_60": (21, 60)}
DIVERGENCE_VRMSE = 1e3


# ---------------------------------------------------------------------------
# the bound


def error_bound(eps: float, lipschitz: float, n: int) -> float:
    if eps < 0 or lipschitz <= 0 or n < 0:
        raise ValueError("need eps >= 0, L > 0, n >= 0")
    d = lipschitz - 1.0
    if abs(d) < 1e-9:
        # first-order expansion of the geometric sum around L = 1
        return eps * (n + d * n * (n - 1) / 2)
    # expm1/log1p keep the geometric sum accurate just outside the switch
    return eps * float(np.expm1(n * np.log1p(d))) / d


def estimate_lipschitz(
    F: Callable[[np.ndarray], np.ndarray],
    probes,
    radius: float = 1e-3,
    n_directions: int = 8,
    seed: int = 0,
) -> float:
    """Largest ``||F(x + d) - F(x)|| / ||d||`` over probes and random ``||d|| = radius``.

    This is a lower bound on the true Lipschitz constant.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    best = 0.0
    for x in probes:
        x = np.asarray(x, dtype=np.float64)
        fx = F(x)
        for _ in range(n_directions):
            d = rng.normal(size=x.shape)
            d *= radius / np.linalg.norm(d)
            best = max(best, float(np.linalg.norm(F(x + d) - fx) / radius))
    return best


@dataclass
class BoundCheck:
    passed: bool
    errors: np.ndarray
    bounds: np.ndarray
    first_violation: int | None = None
    recurrence_ok: bool = True

    def __str__(self):
        if self.passed:
            return f"bound holds for n <= {len(self.errors) - 1}"
        return f"bound violated first at n = {self.first_violation}"


def bound_verification(
    f: Callable[[np.ndarray], np.ndarray],
    F: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    eps: float,
    lipschitz: float,
    n_steps: int,
    slack: float = 1e-9,
) -> BoundCheck:
    """Roll both maps from ``x0`` and compare ``E_n = ||x_hat_n - x_n||`` to the bound."""
    x = np.asarray(x0, dtype=np.float64)
    xh = x.copy()
    errs = [0.0]
    for _ in range(n_steps):
        x, xh = f(x), F(xh)
        errs.append(float(np.linalg.norm(xh - x)))
    errs = np.array(errs)
    bounds = np.array([error_bound(eps, lipschitz, n) for n in range(n_steps + 1)])
    bad = np.flatnonzero(errs > bounds + slack)
    rec = bool(np.all(errs[1:] <= eps + lipschitz * errs[:-1] + slack))
    first = int(bad[0]) if bad.size else None
    return BoundCheck(first is None and rec, errs, bounds, first, rec)


def linear_pair(dim: int, eps: float, lipschitz: float, seed: int = 0):
    """Synthetic ``f(x) = L Q x`` with random orthogonal ``Q`` and ``F = f + eps * u``.

    ``F`` has Lipschitz constant exactly ``L`` and ``||F - f|| = eps`` everywhere.
    """
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)

    def f(x):
        return lipschitz * (Q @ x)

    def F(x):
        return lipschitz * (Q @ x) + eps * u

    return f, F


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutReport:
    """Per-trajectory, per-step errors plus window aggregates.

    ``vrmse``, ``rel_l2`` and ``abs_l2`` have shape ``[n_traj, n_steps + 1]``;
    column 0 is the starting state (error zero). Entries after a trajectory
    diverges are NaN.
    """

    vrmse: np.ndarray
    rel_l2: np.ndarray
    abs_l2: np.ndarray
    diverged: np.ndarray
    windows: dict[str, tuple[int, int]] = field(default_factory=lambda: dict(DEFAULT_WINDOWS))
    lipschitz: float | None = None

    @property
    def n_steps(self) -> int:
        return self.vrmse.shape[1] - 1

    @property
    def eps_hat(self) -> float:
        """Median absolute one-step L2 error over non-diverged trajectories."""
        ok = ~self.diverged
        return float(np.median(self.abs_l2[ok, 1])) if ok.any() else float("nan")

    def window_values(self, name: str, metric: str = "vrmse") -> np.ndarray:
        """Per-trajectory mean over the window's steps (inclusive, 1-based)."""
        lo, hi = self.windows[name]
        hi = min(hi, self.n_steps)
        vals = getattr(self, metric)
        if lo > hi:
            return np.full(len(vals), np.nan)
        return vals[:, lo : hi + 1].mean(axis=1)

    def aggregate(self, metric: str = "vrmse") -> dict[str, float]:
        """Median over non-diverged trajectories for each window."""
        out = {}
        ok = ~self.diverged
        for name in self.windows:
            v = self.window_values(name, metric)[ok]
            v = v[np.isfinite(v)]
            out[name] = float(np.median(v)) if v.size else float("nan")
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["trajectory_id", "step", "vrmse", "rel_l2", "diverged"])
        for i in range(self.vrmse.shape[0]):
            for n in range(1, self.n_steps + 1):
                wr.writerow([i, n, _fmt(self.vrmse[i, n]), _fmt(self.rel_l2[i, n]), int(self.diverged[i])])
        agg_v, agg_r = self.aggregate("vrmse"), self.aggregate("rel_l2")
        n_div = int(self.diverged.sum())
        for name in self.windows:
            wr.writerow([f"median:{name}", "", _fmt(agg_v[name]), _fmt(agg_r[name]), n_div])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else repr(float(v))


def model_step(model) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a model as a plain ``history -> next frame`` map without taping."""

    def step(hist: np.ndarray) -> np.ndarray:
        with no_grad():
            return model(hist).data

    return step


def _step_errors(pred: np.ndarray, target: np.ndarray) -> tuple[float, float, float]:
    d = float(np.linalg.norm((pred - target).ravel()))
    tn = float(np.linalg.norm(target.ravel()))
    rel = d / tn if tn > 0 else (0.0 if d == 0 else float("inf"))
    try:
        v = vrmse(pred, target, spatial_axes=(-3, -2))
    except ArithmeticError:
        v = 0.0 if d == 0 else float("inf")
    return v, rel, d


def autoregressive_rollout(
    step: Callable[[np.ndarray], np.ndarray],
    history: np.ndarray,
    n_steps: int,
    targets: np.ndarray,
    windows: dict[str, tuple[int, int]] | None = None,
) -> RolloutReport:
    """Feed ``step`` its own predictions for ``n_steps`` frames.

    ``history: [B, T, H, W, C]``; ``targets: [B, >= n_steps, H, W, C]``;
    ``step`` maps a history batch to ``[B, 1, H, W, C]``.
    """
    hist = np.asarray(history, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape[1] < n_steps:
        raise ValueError(f"targets cover {targets.shape[1]} steps, rollout needs {n_steps}")
    B = hist.shape[0]
    shape = (B, n_steps + 1)
    V, R, A = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    diverged = np.zeros(B, dtype=bool)
    for n in range(1, n_steps + 1):
        pred = step(hist)
        for b in range(B):
            if diverged[b]:
                continue
            p = pred[b, 0]
            if not np.all(np.isfinite(p)):
                diverged[b] = True
            else:
                V[b, n], R[b, n], A[b, n] = _step_errors(p, targets[b, n - 1])
                diverged[b] = V[b, n] > DIVERGENCE_VRMSE
            if diverged[b]:
                V[b, n:] = R[b, n:] = A[b, n:] = np.nan
        pred = np.where(np.isfinite(pred), pred, 0.0)
        hist = np.concatenate([hist[:, 1:], pred], axis=1)
    return RolloutReport(V, R, A, diverged, dict(windows or DEFAULT_WINDOWS))


def trajectory_rollout(step, trajectories: np.ndarray, history: int, n_steps: int | None = None, windows=None):
    """Rollout from the first ``history`` frames of each ``[B, F, H, W, C]`` trajectory."""
    F = trajectories.shape[1]
    n = F - history if n_steps is None else n_steps
    return autoregressive_rollout(step, trajectories[:, :history], n, trajectories[:, history : history + n], windows)
