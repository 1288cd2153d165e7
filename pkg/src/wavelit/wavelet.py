"""Separable 2-D discrete wavelet transform with reflect boundary extension.

Coefficients follow the PyWavelets storage convention (even-length arrays,
zero-padded), except that the bior4.4 taps are the exact CDF 9/7 values
rather than the 11-digit rounded ones, so that the highpass sums to zero at
machine precision. The haar highpass is stored as (1/sqrt2, -1/sqrt2).

Boundary handling is numpy ``mode="reflect"`` (whole-sample symmetric, the
edge sample is not repeated). With the symmetric biorthogonal filters this
gives a non-expansive transform: a length-n axis maps to n/2 lowpass and n/2
highpass coefficients and the synthesis bank inverts it exactly.

Each per-axis transform is materialized as a dense n x n operator (cached per
size and bank), so the 2-D transform is two constant matrix products and its
tape gradient is the transpose.

Token layout: a single level maps channels-last ``[..., H, W, C]`` to
``[..., H/2, W/2, 4C]`` where channel ``band * C + c`` holds band
``(LL, LH, HL, HH)[band]`` of input channel ``c``. The first letter is the
filter along H, the second along W. Further levels re-apply the transform to
all 4C channels, giving ``C * 4**levels`` channels.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, const_axis_matmul, reshape, transpose

BANDS = ("LL", "LH", "HL", "HH")

_S = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class WaveletFilterBank:
    name: str
    dec_lo: tuple[float, ...]
    dec_hi: tuple[float, ...]
    rec_lo: tuple[float, ...]
    rec_hi: tuple[float, ...]

    @property
    def length(self) -> int:
        return len(self.dec_lo)


_BANKS = {
    "haar": WaveletFilterBank(
        "haar",
        dec_lo=(_S, _S),
        dec_hi=(_S, -_S),
        rec_lo=(_S, _S),
        rec_hi=(_S, -_S),
    ),
    "bior2.2": WaveletFilterBank(
        "bior2.2",
        dec_lo=(0.0, -0.1767766952966369, 0.3535533905932738, 1.0606601717798214, 0.3535533905932738, -0.1767766952966369),
        dec_hi=(0.0, 0.3535533905932738, -0.7071067811865476, 0.3535533905932738, 0.0, 0.0),
        rec_lo=(0.0, 0.3535533905932738, 0.7071067811865476, 0.3535533905932738, 0.0, 0.0),
        rec_hi=(0.0, 0.1767766952966369, 0.3535533905932738, -1.0606601717798214, 0.3535533905932738, 0.1767766952966369),
    ),
    "bior4.4": WaveletFilterBank(
        "bior4.4",
        dec_lo=(
            0.0, 0.03782845550699546, -0.02384946501938, -0.1106244044184234, 0.37740285561265374,
            0.8526986790094034, 0.37740285561265374, -0.1106244044184234, -0.02384946501938, 0.03782845550699546,
        ),
        dec_hi=(
            0.0, -0.06453888262893843, 0.04068941760955844, 0.4180922732222122, -0.7884856164056644,
            0.4180922732222122, 0.04068941760955844, -0.06453888262893843, 0.0, 0.0,
        ),
        rec_lo=(
            0.0, -0.06453888262893843, -0.04068941760955844, 0.4180922732222122, 0.7884856164056644,
            0.4180922732222122, -0.04068941760955844, -0.06453888262893843, 0.0, 0.0,
        ),
        rec_hi=(
            0.0, -0.03782845550699546, -0.02384946501938, 0.1106244044184234, 0.37740285561265374,
            -0.8526986790094034, 0.37740285561265374, 0.1106244044184234, -0.02384946501938, -0.03782845550699546,
        ),
    ),
}

SUPPORTED = tuple(_BANKS)


class WaveletConfigError(ValueError):
    pass


def filter_bank(name: str) -> WaveletFilterBank:
    try:
        return _BANKS[name]
    except KeyError:
        raise WaveletConfigError(f"unknown wavelet {name!r}; supported: {', '.join(SUPPORTED)}") from None


def _reflect(i: int, n: int) -> int:
    if n == 1:
        return 0
    p = 2 * (n - 1)
    i %= p
    return p - i if i >= n else i


def _taps(bank: WaveletFilterBank):
    """(filter, offset) pairs for analysis lo/hi and synthesis lo/hi.

    Lowpass outputs sit on even samples, highpass on odd ones; ``offset`` is
    the tap index aligned with that sample.
    """
    if bank.name == "haar":
        return [(np.array(f), 0) for f in (bank.dec_lo, bank.dec_hi, bank.rec_lo, bank.rec_hi)]
    out = []
    for f, odd in ((bank.dec_lo, 0), (bank.dec_hi, 1), (bank.rec_lo, 0), (bank.rec_hi, 1)):
        core = np.trim_zeros(np.array(f))
        out.append((core, (len(core) - 1) // 2 - odd))
    return out


@functools.lru_cache(maxsize=None)
def analysis_matrix(name: str, n: int) -> np.ndarray:
    """Rows 0..n/2-1 produce lowpass, rows n/2..n-1 highpass coefficients."""
    if n % 2:
        raise DimensionError(f"axis length {n} is odd")
    (lo, olo), (hi, ohi), _, _ = _taps(filter_bank(name))
    h = n // 2
    A = np.zeros((n, n))
    for m in range(h):
        for t, c in enumerate(lo):
            A[m, _reflect(2 * m + t - olo, n)] += c
        for t, c in enumerate(hi):
            A[h + m, _reflect(2 * m + t - ohi, n)] += c
    A.setflags(write=False)
    return A


@functools.lru_cache(maxsize=None)
def synthesis_matrix(name: str, n: int) -> np.ndarray:
    """Inverse of :func:`analysis_matrix`, built from the reconstruction filters.

    Subband sequences are extended symmetrically the same way the signal is,
    which is what makes the boundary reconstruction exact.
    """
    if n % 2:
        raise DimensionError(f"axis length {n} is odd")
    _, _, (rlo, elo), (rhi, ehi) = _taps(filter_bank(name))
    h = n // 2
    reach = max(len(rlo), len(rhi)) + 2
    P = np.zeros((n, n))
    for p in range(n):
        for m in range(-reach, h + reach):
            k = p - 2 * m + elo
            if 0 <= k < len(rlo):
                P[p, _reflect(2 * m, n) // 2] += rlo[k]
            k = p - 2 * m + ehi
            if 0 <= k < len(rhi):
                P[p, h + (_reflect(2 * m + 1, n) - 1) // 2] += rhi[k]
    P.setflags(write=False)
    return P


def _dwt2_level(x: Tensor, name: str) -> Tensor:
    *lead, H, W, C = x.shape
    if H % 2 or W % 2:
        axis = "H" if H % 2 else "W"
        raise DimensionError(f"dwt2: axis {axis} has odd extent ({H}x{W})")
    y = const_axis_matmul(x, analysis_matrix(name, H), -3)
    y = const_axis_matmul(y, analysis_matrix(name, W), -2)
    # [.., (bh, H/2), (bw, W/2), C] -> [.., H/2, W/2, (bh, bw, C)]
    nl = len(lead)
    y = reshape(y, (*lead, 2, H // 2, 2, W // 2, C))
    axes = list(range(nl)) + [nl + 1, nl + 3, nl, nl + 2, nl + 4]
    y = transpose(y, axes)
    return reshape(y, (*lead, H // 2, W // 2, 4 * C))


def _idwt2_level(s: Tensor, name: str) -> Tensor:
    *lead, h, w, C4 = s.shape
    if C4 % 4:
        raise DimensionError(f"idwt2: channel count {C4} is not a multiple of 4")
    C = C4 // 4
    nl = len(lead)
    y = reshape(s, (*lead, h, w, 2, 2, C))
    axes = list(range(nl)) + [nl + 2, nl, nl + 3, nl + 1, nl + 4]
    y = transpose(y, axes)
    y = reshape(y, (*lead, 2 * h, 2 * w, C))
    y = const_axis_matmul(y, synthesis_matrix(name, 2 * h), -3)
    return const_axis_matmul(y, synthesis_matrix(name, 2 * w), -2)


def dwt2(x, wavelet: str = "bior2.2", levels: int = 1) -> Tensor:
    """Multi-level 2-D DWT of a channels-last field ``[..., H, W, C]``.

    Returns tokens ``[..., H/2^l, W/2^l, C*4^l]``. Differentiable.
    """
    x = as_tensor(x)
    filter_bank(wavelet)
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    H, W = x.shape[-3], x.shape[-2]
    f = 2**levels
    if H % f:
        raise DimensionError(f"dwt2: axis H={H} not divisible by 2^{levels}")
    if W % f:
        raise DimensionError(f"dwt2: axis W={W} not divisible by 2^{levels}")
    for _ in range(levels):
        x = _dwt2_level(x, wavelet)
    return x


def idwt2(tokens, wavelet: str = "bior2.2", levels: int = 1) -> Tensor:
    """Exact inverse of :func:`dwt2` with the same bank and level count."""
    s = as_tensor(tokens)
    filter_bank(wavelet)
    if s.shape[-1] % (4**levels):
        raise DimensionError(f"idwt2: {s.shape[-1]} channels cannot hold {levels} level(s) of subbands")
    for _ in range(levels):
        s = _idwt2_level(s, wavelet)
    return s


@dataclass
class SubbandSet:
    """Named view of single-level tokens: each band is ``[..., H/2, W/2, C]``."""

    LL: np.ndarray
    LH: np.ndarray
    HL: np.ndarray
    HH: np.ndarray

    @classmethod
    def from_tokens(cls, tokens) -> "SubbandSet":
        arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
        C = arr.shape[-1] // 4
        return cls(*(arr[..., b * C : (b + 1) * C] for b in range(4)))

    def to_tokens(self) -> np.ndarray:
        shapes = {b.shape for b in (self.LL, self.LH, self.HL, self.HH)}
        if len(shapes) != 1:
            raise DimensionError(f"inconsistent subband shapes: {sorted(shapes)}")
        return np.concatenate([self.LL, self.LH, self.HL, self.HH], axis=-1)
