"""WaveLiT assembly and the multi-dataset (FM) extension.

Forward pass for ``x: [B, T, H, W, C]``:

1. ``dwt2`` to tokens ``[B, T, h, w, C * nb]`` with ``nb = 4**dwt_levels``;
2. per spatial location, each input channel's ``T * nb`` coefficients
   (ordered time-major, then subband) are projected by its own slice of the
   lifting tensor ``[C, T * nb, D]`` and the per-channel results are summed
   in channel order (no bias);
3. ``depth`` shared-weight pyramid blocks;
4. a linear head to ``C_out * nb`` subband channels and ``idwt2``.

The head starts at zero, so an untrained model predicts the zero field (or
the last input frame when ``predict_delta`` is set).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mixer import MixerFlags
from .pyramid import PyramidParams, init_pyramid_params, pyramid_forward
from .tensor import DimensionError, Tensor, as_tensor
from .wavelet import dwt2, filter_bank, idwt2


class ModelConfigError(ValueError):
    pass


@dataclass
class WaveLiTConfig:
    embed_dim: int = 32
    depth: int = 2
    fpn_levels: int = 1
    wavelet: str = "bior2.2"
    dwt_levels: int = 1
    in_channels: int = 1
    out_channels: int = 0  # 0 -> same as in_channels
    history: int = 4
    grid: tuple[int, int] = (32, 32)
    heads: int = 1
    mlp_ratio: int = 4
    predict_delta: bool = False
    flags: MixerFlags = field(default_factory=MixerFlags)

    def __post_init__(self):
        self.grid = tuple(self.grid)
        if isinstance(self.flags, dict):
            self.flags = MixerFlags(**self.flags)
        if self.out_channels == 0:
            self.out_channels = self.in_channels

    @property
    def n_bands(self) -> int:
        return 4**self.dwt_levels

    @property
    def token_grid(self) -> tuple[int, int]:
        f = 2**self.dwt_levels
        return self.grid[0] // f, self.grid[1] // f

    def validate(self) -> None:
        filter_bank(self.wavelet)
        if self.embed_dim < 1 or self.depth < 1:
            raise ModelConfigError("embed_dim and depth must be >= 1")
        if self.history < 1 or self.in_channels < 1 or self.dwt_levels < 1 or self.fpn_levels < 0:
            raise ModelConfigError("history, in_channels, dwt_levels must be >= 1 and fpn_levels >= 0")
        f = 2 ** (self.dwt_levels + self.fpn_levels)
        for name, n in zip("HW", self.grid):
            if n % f:
                raise ModelConfigError(f"grid {name}={n} must be divisible by 2^(dwt_levels+fpn_levels)={f}")
        if self.embed_dim % self.heads:
            raise ModelConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.flags.rope and (self.embed_dim // self.heads) % 4:
            raise ModelConfigError("rotary embedding needs head dim divisible by 4")
        if self.predict_delta and self.out_channels != self.in_channels:
            raise ModelConfigError("predict_delta needs out_channels == in_channels")


# named desk-scale configurations; counts are exact for history=4, C=1
NAMED_CONFIGS = {
    "wavelit-tiny": dict(embed_dim=32, depth=2, heads=1),
    "wavelit-small-proxy": dict(embed_dim=144, depth=4, heads=4),
}


def named_config(name: str, **overrides) -> WaveLiTConfig:
    if name not in NAMED_CONFIGS:
        raise ModelConfigError(f"unknown config {name!r}; known: {', '.join(NAMED_CONFIGS)}")
    return WaveLiTConfig(**{**NAMED_CONFIGS[name], **overrides})


def param_count(params) -> int:
    """Total learnable scalars in a name -> Tensor mapping."""
    return int(sum(t.size for t in params.values()))


def block_param_formula(D: int, r: int = 4, fpn_levels: int = 1, k: int = 3) -> int:
    """Closed-form parameter count of one full-flag pyramid block."""
    dense = (6 + 2 * r) * D * D  # q,k,v,o,in,gate + two MLP layers
    vec = 2 * D + r * D + D + D  # norms, mlp biases, gate bias
    conv = 4 * k * k * D  # in_conv, lepe, two cpe
    return dense + vec + conv + 1 + fpn_levels + 1


def _init_linear(rng, n_in, n_out, zero=False):
    if zero:
        return T.parameter(np.zeros((n_in, n_out)))
    return T.parameter(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)))


class Trunk:
    """Wavelet embedding (lifting) plus the stack of pyramid blocks."""

    def __init__(self, cfg: WaveLiTConfig, n_channels: int, rng: np.random.Generator):
        self.cfg = cfg
        D = cfg.embed_dim
        fan_in = n_channels * cfg.history * cfg.n_bands
        self.lift = T.parameter(
            rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(n_channels, cfg.history * cfg.n_bands, D))
        )
        self.blocks: list[PyramidParams] = [
            init_pyramid_params(D, cfg.fpn_levels, rng, cfg.flags, mlp_ratio=cfg.mlp_ratio) for _ in range(cfg.depth)
        ]

    def named(self) -> dict[str, Tensor]:
        out = {"embed.lift": self.lift}
        for i, b in enumerate(self.blocks):
            out.update(b.named(f"blocks.{i}."))
        return out

    def channel_tokens(self, x: Tensor) -> Tensor:
        """``[B, T, H, W, C]`` -> ``[B, N, C, T * nb]`` wavelet coefficients."""
        cfg = self.cfg
        B, Tm, H, W, C = x.shape
        if (Tm, H, W) != (cfg.history, *cfg.grid):
            raise DimensionError(f"input {x.shape} does not match history {cfg.history} and grid {cfg.grid}")
        if C != self.lift.shape[0]:
            raise DimensionError(f"input has {C} channels, lifting expects {self.lift.shape[0]}")
        tok = dwt2(x, cfg.wavelet, cfg.dwt_levels)
        h, w = cfg.token_grid
        nb = cfg.n_bands
        tok = T.reshape(tok, (B, Tm, h, w, nb, C))
        tok = T.transpose(tok, (0, 2, 3, 5, 1, 4))
        return T.reshape(tok, (B, h * w, C, Tm * nb))

    def lift_sum(self, ct: Tensor, skip: frozenset[int] = frozenset()) -> Tensor:
        """sum_c ct[:, :, c] @ lift[c], accumulated in channel order."""
        z = None
        for c in range(ct.shape[2]):
            if c in skip:
                continue
            term = ct[:, :, c, :] @ self.lift[c]
            z = term if z is None else z + term
        if z is None:
            B, N = ct.shape[:2]
            z = Tensor(np.zeros((B, N, self.cfg.embed_dim)))
        return z

    def mix(self, z: Tensor) -> Tensor:
        cfg = self.cfg
        for b in self.blocks:
            z = pyramid_forward(z, cfg.token_grid, b, cfg.flags, cfg.heads)
        return z


def _decode(cfg: WaveLiTConfig, z: Tensor, weight: Tensor, bias: Tensor, n_out: int) -> Tensor:
    B = z.shape[0]
    h, w = cfg.token_grid
    y = z @ weight + bias
    y = T.reshape(y, (B, 1, h, w, n_out * cfg.n_bands))
    return idwt2(y, cfg.wavelet, cfg.dwt_levels)


class WaveLiT:
    """Bespoke single-dataset surrogate: history frames -> next frame."""

    def __init__(self, cfg: WaveLiTConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.trunk = Trunk(cfg, cfg.in_channels, rng)
        nout = cfg.out_channels * cfg.n_bands
        self.head_w = _init_linear(rng, cfg.embed_dim, nout, zero=True)
        self.head_b = T.parameter(np.zeros(nout))

    def parameters(self) -> dict[str, Tensor]:
        out = self.trunk.named()
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def embed(self, x) -> Tensor:
        return self.trunk.lift_sum(self.trunk.channel_tokens(as_tensor(x)))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        z = self.trunk.mix(self.embed(x))
        y = _decode(self.cfg, z, self.head_w, self.head_b, self.cfg.out_channels)
        if self.cfg.predict_delta:
            y = y + x[:, -1:, :, :, :]
        return y

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        load_into(self.parameters(), arrays)


def load_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(arrays)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, t in params.items():
        a = arrays[name]
        if a.shape != t.shape:
            raise DimensionError(f"{name}: checkpoint shape {a.shape} vs model {t.shape}")
        t.data = np.array(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# multi-dataset extension


class FMConfigError(ValueError):
    pass


@dataclass
class FMConfig:
    canonical_channels: list[str]
    datasets: dict[str, list[str]]  # dataset -> its native fields, in native order

    @property
    def n_canonical(self) -> int:
        return len(self.canonical_channels)

    @property
    def task_names(self) -> list[str]:
        return list(self.datasets)

    def channel_map(self, dataset: str) -> list[int]:
        return [self.canonical_channels.index(f) for f in self.datasets[dataset]]

    def validate(self) -> None:
        if len(set(self.canonical_channels)) != len(self.canonical_channels):
            raise FMConfigError("canonical channel names must be unique")
        for ds, fields_ in self.datasets.items():
            unknown = [f for f in fields_ if f not in self.canonical_channels]
            if unknown:
                raise FMConfigError(f"dataset {ds!r} uses unknown fields {unknown}")
            if len(set(fields_)) != len(fields_):
                raise FMConfigError(f"dataset {ds!r} lists a field twice")


class WaveLiTFM:
    """Shared trunk over a canonical channel space, task embeddings, per-dataset heads."""

    def __init__(self, cfg: WaveLiTConfig, fm: FMConfig, seed: int = 0):
        fm.validate()
        cfg.validate()
        self.cfg, self.fm = cfg, fm
        rng = np.random.default_rng(seed)
        self.trunk = Trunk(cfg, fm.n_canonical, rng)
        self.task_embed = T.parameter(np.zeros((len(fm.datasets), cfg.embed_dim)))
        self.heads: dict[str, tuple[Tensor, Tensor]] = {}
        for ds, fields_ in fm.datasets.items():
            nout = len(fields_) * cfg.n_bands
            self.heads[ds] = (_init_linear(rng, cfg.embed_dim, nout, zero=True), T.parameter(np.zeros(nout)))

    def parameters(self) -> dict[str, Tensor]:
        out = self.trunk.named()
        out["task_embed"] = self.task_embed
        for ds, (w, b) in self.heads.items():
            out[f"heads.{ds}.weight"] = w
            out[f"heads.{ds}.bias"] = b
        return out

    def trunk_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if not k.startswith("heads.")}

    def dataset_index(self, dataset: str | int) -> int:
        names = self.fm.task_names
        if isinstance(dataset, int):
            if not 0 <= dataset < len(names):
                raise FMConfigError(f"dataset id {dataset} out of range [0, {len(names)})")
            return dataset
        if dataset not in names:
            raise FMConfigError(f"unknown dataset {dataset!r}; registered: {names}")
        return names.index(dataset)

    def to_canonical(self, x_native: np.ndarray, dataset: str) -> np.ndarray:
        """Scatter native channels into the zero-padded canonical layout."""
        idx = self.fm.channel_map(dataset)
        if x_native.shape[-1] != len(idx):
            raise DimensionError(f"{dataset} expects {len(idx)} channels, got {x_native.shape[-1]}")
        out = np.zeros((*x_native.shape[:-1], self.fm.n_canonical))
        out[..., idx] = x_native
        return out

    def fm_embed(self, x_canonical, dataset, skip: frozenset[int] = frozenset()) -> Tensor:
        k = self.dataset_index(dataset)
        z = self.trunk.lift_sum(self.trunk.channel_tokens(as_tensor(x_canonical)), skip)
        return z + self.task_embed[k]

    def fm_head(self, latent: Tensor, dataset) -> Tensor:
        name = self.fm.task_names[self.dataset_index(dataset)]
        w, b = self.heads[name]
        return _decode(self.cfg, latent, w, b, len(self.fm.datasets[name]))

    def __call__(self, x_canonical, dataset) -> Tensor:
        return self.fm_head(self.trunk.mix(self.fm_embed(x_canonical, dataset)), dataset)
