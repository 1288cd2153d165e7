"""Linear-attention token mixer for channels-last grids.

The block (all flags on), for tokens ``x: [B, N, D]`` on an ``h x w`` grid:

    x <- x + CPE_attn(x)
    y  = rmsnorm(x)
    a  = silu(dwconv(y W_in))                 # MILA-style input stage
    q, k, v = a W_q, a W_k, a W_v
    o  = ridge_attention(rope(phi(q)), rope(phi(k)), v) + LePE(v)
    o  = o * sigmoid(y W_g + b_g)             # kernel gate
    x <- x + o W_o
    x <- x + CPE_mlp(x)
    x <- x + MLP(rmsnorm(x))

``phi = elu + 1``. With ``mila_block`` off the input stage is skipped
(``a = y``). With ``ridge`` off the state is the plain sum ``C`` scaled by
1/N, i.e. the large-lambda regime with lambda = N. The output projection,
MLP output layer and CPE/LePE kernels start at zero, so a fresh block is the
identity map.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor, as_tensor


class MixerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MixerFlags:
    ridge: bool = True
    gate: bool = True
    lepe: bool = True
    cpe: bool = True
    rope: bool = True
    mila_block: bool = True
    attention: str = "linear"  # "linear" | "softmax"


# mixer ablation rows; RoPE stays on throughout
ABLATIONS: dict[str, MixerFlags] = {
    "A1": MixerFlags(ridge=False, gate=False, lepe=False, cpe=False, mila_block=False),
    "A2": MixerFlags(ridge=True, gate=False, lepe=False, cpe=False, mila_block=False),
    "A3": MixerFlags(ridge=True, gate=True, lepe=False, cpe=False, mila_block=False),
    "A4": MixerFlags(ridge=True, gate=True, lepe=True, cpe=False, mila_block=False),
    "A5": MixerFlags(ridge=True, gate=True, lepe=True, cpe=True, mila_block=False),
    "B1": MixerFlags(ridge=False, gate=False, lepe=True, cpe=False, mila_block=True),
    "B2": MixerFlags(ridge=True, gate=False, lepe=True, cpe=False, mila_block=True),
    "B3": MixerFlags(ridge=True, gate=False, lepe=True, cpe=True, mila_block=True),
    "C1": MixerFlags(),
}


# ---------------------------------------------------------------------------
# attention primitives


def feature_map(x) -> Tensor:
    return T.elu_plus_one(as_tensor(x))


@dataclass
class AttentionState:
    C: Tensor  # [..., d_v, d_k], sum_j v_j phi(k_j)^T
    G: Tensor  # [..., d_k, d_k], sum_j phi(k_j) phi(k_j)^T


def attention_state(fk: Tensor, v: Tensor) -> AttentionState:
    """Accumulate the key-value state from key features ``fk: [..., N, d_k]``."""
    return AttentionState(C=T.swap_last(v) @ fk, G=T.swap_last(fk) @ fk)


def _check_tokens(q, k, v):
    if not (q.shape[:-1] == k.shape[:-1] == v.shape[:-1]):
        raise DimensionError(f"token counts differ: q{q.shape} k{k.shape} v{v.shape}")


def linear_attention_vanilla(q, k, v) -> Tensor:
    """o_i = C phi(q_i), C = sum_j v_j phi(k_j)^T (no normalizing denominator)."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_tokens(q, k, v)
    fq, fk = feature_map(q), feature_map(k)
    return fq @ (T.swap_last(fk) @ v)


def ridge_state(fk: Tensor, v: Tensor, lam) -> Tensor:
    """S_lambda^T = (G + lambda I)^{-1} C^T, shape ``[..., d_k, d_v]``."""
    d = fk.shape[-1]
    st = attention_state(fk, v)
    lam = as_tensor(lam)
    A = st.G + lam * np.eye(d)
    return T.solve_spd(A, T.swap_last(st.C))


def linear_attention_ridge(q, k, v, lam) -> Tensor:
    """o_i = S_lambda phi(q_i) with S_lambda = C (G + lambda I)^{-1}."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_tokens(q, k, v)
    if not isinstance(lam, Tensor) and not lam > 0:
        raise ValueError(f"ridge lambda must be positive, got {lam}")
    return feature_map(q) @ ridge_state(feature_map(k), v, lam)


def ridge_objective(S, k_set, v_set, lam) -> Tensor:
    """sum_j ||v_j - S phi(k_j)||^2 + lambda ||S||_F^2 for ``S: [d_v, d_k]``."""
    S = as_tensor(S)
    fk = feature_map(k_set)
    resid = as_tensor(v_set) - fk @ T.swap_last(S)
    return T.tsum(T.square(resid)) + T.scale(T.tsum(T.square(S)), float(lam))


def softmax_attention_reference(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v, the quadratic-cost reference."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    _check_tokens(q, k, v)
    scores = T.scale(q @ T.swap_last(k), 1.0 / math.sqrt(q.shape[-1]))
    return T.softmax(scores, axis=-1) @ v


# ---------------------------------------------------------------------------
# rotary embedding on a 2-D grid


def rope_frequencies(extent: int, n_pairs: int) -> np.ndarray:
    """Geometric ladder from pi/2 rad/cell down to 2*pi/extent (one period per grid)."""
    hi = math.pi / 2
    lo = min(2 * math.pi / max(extent, 1), hi)
    if n_pairs == 1:
        return np.array([lo])
    return hi * (lo / hi) ** (np.arange(n_pairs) / (n_pairs - 1))


@functools.lru_cache(maxsize=64)
def _rope_tables(h: int, w: int, d: int):
    m = d // 4
    rows, cols = np.divmod(np.arange(h * w), w)
    ang = np.concatenate(
        [rows[:, None] * rope_frequencies(h, m)[None], cols[:, None] * rope_frequencies(w, m)[None]], axis=1
    )
    a_idx = np.concatenate([np.arange(m), 2 * m + np.arange(m)])
    b_idx = a_idx + m
    cos, sin = np.cos(ang), np.sin(ang)
    for arr in (cos, sin):
        arr.setflags(write=False)
    return a_idx, b_idx, cos, sin


def apply_rope(x, grid: tuple[int, int]) -> Tensor:
    """Axial 2-D rotary embedding on ``x: [..., N, d]`` with N = h*w row-major.

    The first d/2 features rotate with the row index, the rest with the column
    index; each half is split into (first, second) quarter pairs.
    """
    x = as_tensor(x)
    h, w = grid
    *_, N, d = x.shape
    if d % 4:
        raise MixerConfigError(f"rotary embedding needs feature dim divisible by 4, got {d}")
    if N != h * w:
        raise DimensionError(f"{N} tokens do not fill a {h}x{w} grid")
    ai, bi, cos, sin = _rope_tables(h, w, d)
    xa, xb = x.data[..., ai], x.data[..., bi]
    y = np.empty_like(x.data)
    y[..., ai] = xa * cos - xb * sin
    y[..., bi] = xa * sin + xb * cos

    def bw(g):
        ga, gb = g[..., ai], g[..., bi]
        gx = np.empty_like(g)
        gx[..., ai] = ga * cos + gb * sin
        gx[..., bi] = gb * cos - ga * sin
        return (gx,)

    return T.make_op(y, (x,), bw, "rope")


# ---------------------------------------------------------------------------
# block


@dataclass
class MixerParams:
    norm1: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ridge_raw: Tensor
    norm2: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    w_in: Tensor | None = None
    in_conv: Tensor | None = None
    gate_proj: Tensor | None = None
    gate_bias: Tensor | None = None
    lepe_kernels: Tensor | None = None
    cpe_attn: Tensor | None = None
    cpe_mlp: Tensor | None = None

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @property
    def ridge_lambda(self) -> Tensor:
        return T.softplus(self.ridge_raw)


def init_mixer_params(
    dim: int,
    rng: np.random.Generator,
    flags: MixerFlags = MixerFlags(),
    mlp_ratio: int = 4,
    kernel: int = 3,
    ridge_init: float = 1.0,
) -> MixerParams:
    P = T.parameter

    def lin(n_in, n_out):
        return P(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)))

    hid = mlp_ratio * dim
    p = MixerParams(
        norm1=P(np.ones(dim)),
        w_q=lin(dim, dim),
        w_k=lin(dim, dim),
        w_v=lin(dim, dim),
        w_o=P(np.zeros((dim, dim))),
        ridge_raw=P(np.log(np.expm1(ridge_init))),
        norm2=P(np.ones(dim)),
        mlp_w1=lin(dim, hid),
        mlp_b1=P(np.zeros(hid)),
        mlp_w2=P(np.zeros((hid, dim))),
        mlp_b2=P(np.zeros(dim)),
    )
    if flags.mila_block:
        p.w_in = lin(dim, dim)
        delta = np.zeros((kernel, kernel, dim))
        delta[kernel // 2, kernel // 2] = 1.0
        p.in_conv = P(delta)
    if flags.gate:
        p.gate_proj = lin(dim, dim)
        p.gate_bias = P(np.zeros(dim))
    if flags.lepe:
        p.lepe_kernels = P(np.zeros((kernel, kernel, dim)))
    if flags.cpe:
        p.cpe_attn = P(np.zeros((kernel, kernel, dim)))
        p.cpe_mlp = P(np.zeros((kernel, kernel, dim)))
    return p


def _spatial(x: Tensor, grid) -> Tensor:
    B, N, D = x.shape
    return T.reshape(x, (B, grid[0], grid[1], D))


def _tokens(x: Tensor) -> Tensor:
    B, h, w, D = x.shape
    return T.reshape(x, (B, h * w, D))


def _conv_tokens(x: Tensor, kernels: Tensor, grid) -> Tensor:
    return _tokens(T.depthwise_conv2(_spatial(x, grid), kernels))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, D = x.shape
    return T.transpose(T.reshape(x, (B, N, heads, D // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, H, N, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, N, H * d))


def mix_attention(q: Tensor, k: Tensor, v: Tensor, p: MixerParams, grid, flags: MixerFlags, heads: int) -> Tensor:
    qh, kh, vh = (_split_heads(t, heads) for t in (q, k, v))
    N = q.shape[1]
    if flags.attention == "softmax":
        if flags.rope:
            qh, kh = apply_rope(qh, grid), apply_rope(kh, grid)
        o = softmax_attention_reference(qh, kh, vh)
    elif flags.attention == "linear":
        fq, fk = feature_map(qh), feature_map(kh)
        if flags.rope:
            fq, fk = apply_rope(fq, grid), apply_rope(fk, grid)
        if flags.ridge:
            o = fq @ ridge_state(fk, vh, p.ridge_lambda)
        else:
            o = T.scale(fq @ (T.swap_last(fk) @ vh), 1.0 / N)
    else:
        raise MixerConfigError(f"unknown attention kind {flags.attention!r}; use 'linear' or 'softmax'")
    return _merge_heads(o)


def mixer_block(x, p: MixerParams, grid: tuple[int, int], flags: MixerFlags = MixerFlags(), heads: int = 1) -> Tensor:
    x = as_tensor(x)
    B, N, D = x.shape
    if N != grid[0] * grid[1]:
        raise DimensionError(f"mixer_block: {N} tokens vs grid {grid[0]}x{grid[1]}")
    if D % heads:
        raise MixerConfigError(f"embed dim {D} not divisible by {heads} heads")

    if flags.cpe:
        x = x + _conv_tokens(x, p.cpe_attn, grid)
    y = T.rms_norm(x, p.norm1)
    a = T.silu(_conv_tokens(y @ p.w_in, p.in_conv, grid)) if flags.mila_block else y
    q, k, v = a @ p.w_q, a @ p.w_k, a @ p.w_v
    o = mix_attention(q, k, v, p, grid, flags, heads)
    if flags.lepe:
        o = o + _conv_tokens(v, p.lepe_kernels, grid)
    if flags.gate:
        o = o * T.sigmoid(y @ p.gate_proj + p.gate_bias)
    x = x + o @ p.w_o

    if flags.cpe:
        x = x + _conv_tokens(x, p.cpe_mlp, grid)
    z = T.rms_norm(x, p.norm2)
    z = T.gelu(z @ p.mlp_w1 + p.mlp_b1) @ p.mlp_w2 + p.mlp_b2
    return x + z


def with_flags(flags: MixerFlags, **kw) -> MixerFlags:
    return replace(flags, **kw)
