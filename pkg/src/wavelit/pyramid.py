"""Shared-weight multiscale pyramid around one mixer block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mixer import MixerFlags, MixerParams, init_mixer_params, mixer_block
from .tensor import DimensionError, Tensor, as_tensor


@dataclass
class PyramidParams:
    mixer: MixerParams
    level_weights: Tensor  # [L + 1], raw (unnormalized) scalars

    @property
    def levels(self) -> int:
        return self.level_weights.shape[0] - 1

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = self.mixer.named(prefix + "mixer.")
        out[prefix + "level_weights"] = self.level_weights
        return out


def init_pyramid_params(dim: int, levels: int, rng: np.random.Generator, flags: MixerFlags = MixerFlags(), **kw):
    return PyramidParams(
        mixer=init_mixer_params(dim, rng, flags, **kw),
        level_weights=T.parameter(np.full(levels + 1, 1.0 / (levels + 1))),
    )


def pyramid_forward(x, grid: tuple[int, int], p: PyramidParams, flags: MixerFlags = MixerFlags(), heads: int = 1):
    """sum_l w_l * upsample^l(mixer(pool^l(x), grid / 2^l)) for l = 0..L."""
    x = as_tensor(x)
    B, N, D = x.shape
    h, w = grid
    L = p.levels
    f = 2**L
    if h % f or w % f:
        raise DimensionError(f"pyramid with {L} level(s) needs grid divisible by {f}, got {h}x{w}")
    if N != h * w:
        raise DimensionError(f"{N} tokens vs grid {h}x{w}")

    level = T.reshape(x, (B, h, w, D))
    out = None
    for ell in range(L + 1):
        if ell:
            level = T.avg_pool2(level)
        gh, gw = h >> ell, w >> ell
        assert level.shape[1] * level.shape[2] == N // 4**ell
        y = mixer_block(T.reshape(level, (B, gh * gw, D)), p.mixer, (gh, gw), flags, heads)
        y = T.reshape(y, (B, gh, gw, D))
        for _ in range(ell):
            y = T.upsample_nearest2(y)
        term = y * p.level_weights[ell]
        out = term if out is None else out + term
    return T.reshape(out, (B, N, D))
