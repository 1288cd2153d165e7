"""Training losses, evaluation metrics and the RAPSD spectral diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, as_tensor
from .wavelet import dwt2


class UndefinedMetricError(ArithmeticError):
    pass


@dataclass
class LossWeights:
    lambda_mse: float = 1.0
    lambda_l1: float = 1.0
    # mean over subband coefficients by default; "sum" adds them up instead
    wavelet_reduction: str = "mean"

    def __post_init__(self):
        if not (np.isfinite(self.lambda_mse) and np.isfinite(self.lambda_l1)):
            raise ValueError("loss weights must be finite")
        if self.lambda_mse < 0 or self.lambda_l1 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.wavelet_reduction not in ("mean", "sum"):
            raise ValueError(f"wavelet_reduction must be 'mean' or 'sum', got {self.wavelet_reduction!r}")


def wavelet_l1(pred, target, wavelet: str = "bior2.2", levels: int = 1, reduction: str = "mean") -> Tensor:
    """L1 distance between the subband coefficients of pred and target."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"wavelet_l1: {pred.shape} vs {target.shape}")
    diff = dwt2(pred - target, wavelet, levels)
    total = T.tsum(T.tabs(diff))
    return total if reduction == "sum" else T.scale(total, 1.0 / diff.size)


def loss_terms(pred, target, wavelet: str = "bior2.2", weights: LossWeights = LossWeights(), levels: int = 1):
    """(weighted total, mse term, wavelet-l1 term) as tensors."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"combined_loss: {pred.shape} vs {target.shape}")
    mse = T.mse_reduce(pred, target)
    wl1 = wavelet_l1(pred, target, wavelet, levels, weights.wavelet_reduction)
    total = T.scale(mse, weights.lambda_mse) + T.scale(wl1, weights.lambda_l1)
    return total, mse, wl1


def combined_loss(pred, target, wavelet: str = "bior2.2", weights: LossWeights = LossWeights(), levels: int = 1):
    """lambda_mse * mean((p - t)^2) + lambda_l1 * mean(|dwt2(p) - dwt2(t)|)."""
    return loss_terms(pred, target, wavelet, weights, levels)[0]


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def relative_l2(pred, target) -> float:
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise DimensionError(f"relative_l2: {p.shape} vs {t.shape}")
    den = np.linalg.norm(t.ravel())
    if den == 0:
        raise UndefinedMetricError("relative L2 is undefined for a zero target")
    return float(np.linalg.norm((p - t).ravel()) / den)


def vrmse(pred, target, spatial_axes: tuple[int, ...] = (-3, -2)) -> float:
    """RMSE / std(target) per channel over the spatial axes, averaged over channels.

    Inputs are channels-last; any leading axes are folded into the averages.
    """
    p, t = _arr(pred), _arr(target)
    if p.shape != t.shape:
        raise DimensionError(f"vrmse: {p.shape} vs {t.shape}")
    axes = tuple(a % t.ndim for a in spatial_axes)
    lead = tuple(i for i in range(t.ndim - 1) if i not in axes)
    red = axes + lead
    rmse = np.sqrt(np.mean((p - t) ** 2, axis=red))
    std = np.sqrt(np.mean((t - t.mean(axis=axes, keepdims=True)) ** 2, axis=red))
    bad = np.flatnonzero(std == 0)
    if bad.size:
        raise UndefinedMetricError(f"vrmse undefined: target channel {int(bad[0])} has zero variance")
    return float(np.mean(rmse / std))


def rapsd(field: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radially averaged power spectrum of a square 2-D field.

    Power is ``|F|^2`` of the unnormalized DFT, so ``sum(|F|^2) = H*W*sum(x^2)``.
    Bins are integer radii ``floor(sqrt(kx^2 + ky^2))`` over signed frequencies;
    returns (radii, mean power per radius).
    """
    f = np.asarray(field, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] != f.shape[1]:
        raise DimensionError(f"rapsd needs a square 2-D field, got shape {f.shape}")
    n = f.shape[0]
    power = np.abs(np.fft.fft2(f)) ** 2
    k = np.fft.fftfreq(n, d=1.0 / n)
    r = np.floor(np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)).astype(int)
    counts = np.bincount(r.ravel())
    sums = np.bincount(r.ravel(), weights=power.ravel())
    radii = np.flatnonzero(counts)
    return radii, sums[radii] / counts[radii]


def rapsd_total_power(field: np.ndarray) -> float:
    """sum |F|^2 over all frequencies (the quantity Parseval pins)."""
    return float(np.sum(np.abs(np.fft.fft2(np.asarray(field, dtype=np.float64))) ** 2))
