"""Synthetic periodic 2-D PDE trajectories with exact or reference solvers.

All systems live on the unit torus [0, 1)^2 sampled at ``H x W`` points.

* heat2d: u_t = nu * lap(u), solved exactly per Fourier mode.
* advection2d: u_t + a u_x + b u_y = 0, solved exactly by a spectral shift.
  ``x`` runs along the W axis, ``y`` along H.
* gray_scott2d: two-species reaction-diffusion with a 5-point Laplacian,
  integrated with classical RK4 using 16 substeps per frame.

Trajectory file layout (little-endian)::

    b"WLTR"  u32 version  u32 system_id  u32 n_traj  u32 n_frames
    u32 H  u32 W  u32 C  f64 dt  u64 seed  u32 n_params  f64 params[n_params]
    f64 data[n_traj, n_frames, H, W, C]

``n_frames`` counts stored frames, initial state included.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

SYSTEMS = ("heat2d", "advection2d", "gray_scott2d")
FILE_MAGIC = b"WLTR"
FILE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIIdQI")

DEFAULT_PARAMS = {
    "heat2d": {"nu": 0.002},
    "advection2d": {"a": 1.0, "b": 0.5},
    "gray_scott2d": {"du": 2e-5, "dv": 1e-5, "feed": 0.04, "kill": 0.06},
}
PARAM_ORDER = {k: tuple(v) for k, v in DEFAULT_PARAMS.items()}


class GenerationError(RuntimeError):
    pass


@dataclass
class TrajectorySpec:
    system: str = "heat2d"
    grid: tuple[int, int] = (32, 32)
    n_steps: int = 16
    dt: float = 1.0
    params: dict = field(default_factory=dict)
    seed: int = 0
    substeps: int = 16  # gray_scott2d only

    def __post_init__(self):
        self.grid = tuple(self.grid)
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}; supported: {', '.join(SYSTEMS)}")
        for n in self.grid:
            if n < 2 or n > 128 or n & (n - 1):
                raise ValueError(f"grid extents must be powers of two in [2, 128], got {self.grid}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.system])
        if unknown:
            raise ValueError(f"unknown parameters for {self.system}: {sorted(unknown)}")
        self.params = {**DEFAULT_PARAMS[self.system], **self.params}
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def channels(self) -> int:
        return 2 if self.system == "gray_scott2d" else 1


@dataclass
class TrajectoryBatch:
    """``data: [n_traj, n_frames, H, W, C]`` plus the spec that produced it."""

    data: np.ndarray
    spec: TrajectorySpec
    dataset: str = ""

    def windows(self, history: int) -> tuple[np.ndarray, np.ndarray]:
        """All (history, next frame) pairs: ``[M, T, H, W, C]`` and ``[M, 1, H, W, C]``."""
        n, F = self.data.shape[:2]
        xs, ys = [], []
        for s in range(F - history):
            xs.append(self.data[:, s : s + history])
            ys.append(self.data[:, s + history : s + history + 1])
        return np.concatenate(xs), np.concatenate(ys)


def _wavenumbers(n: int) -> np.ndarray:
    return np.fft.fftfreq(n, d=1.0 / n)


def band_limited_field(grid, rng: np.random.Generator, kmax: float | None = None) -> np.ndarray:
    """Zero-mean, unit-std random field with Fourier support in |k| <= kmax (default H/4)."""
    H, W = grid
    kmax = min(H, W) / 4 if kmax is None else kmax
    F = np.fft.fft2(rng.normal(size=(H, W)))
    ky, kx = np.meshgrid(_wavenumbers(H), _wavenumbers(W), indexing="ij")
    F[np.sqrt(kx**2 + ky**2) > kmax] = 0.0
    F[0, 0] = 0.0
    u = np.fft.ifft2(F).real
    return u / u.std()


def _heat_step(u: np.ndarray, nu: float, t: float) -> np.ndarray:
    H, W = u.shape[:2]
    ky, kx = np.meshgrid(_wavenumbers(H), _wavenumbers(W), indexing="ij")
    damp = np.exp(-nu * 4 * np.pi**2 * (kx**2 + ky**2) * t)
    return np.fft.ifft2(np.fft.fft2(u, axes=(0, 1)) * damp[..., None], axes=(0, 1)).real


def _advect_step(u: np.ndarray, a: float, b: float, t: float) -> np.ndarray:
    H, W = u.shape[:2]
    ky, kx = np.meshgrid(_wavenumbers(H), _wavenumbers(W), indexing="ij")
    phase = np.exp(-2j * np.pi * (kx * a + ky * b) * t)
    return np.fft.ifft2(np.fft.fft2(u, axes=(0, 1)) * phase[..., None], axes=(0, 1)).real


def _laplacian(f: np.ndarray, H: int, W: int) -> np.ndarray:
    return (np.roll(f, 1, 0) + np.roll(f, -1, 0) - 2 * f) * H * H + (np.roll(f, 1, 1) + np.roll(f, -1, 1) - 2 * f) * W * W


def _gs_rhs(s: np.ndarray, p: dict) -> np.ndarray:
    H, W = s.shape[:2]
    u, v = s[..., 0], s[..., 1]
    uvv = u * v * v
    du = p["du"] * _laplacian(u, H, W) - uvv + p["feed"] * (1 - u)
    dv = p["dv"] * _laplacian(v, H, W) + uvv - (p["feed"] + p["kill"]) * v
    return np.stack([du, dv], axis=-1)


def _gs_step(s: np.ndarray, p: dict, dt: float, substeps: int) -> np.ndarray:
    h = dt / substeps
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(substeps):
            k1 = _gs_rhs(s, p)
            k2 = _gs_rhs(s + 0.5 * h * k1, p)
            k3 = _gs_rhs(s + 0.5 * h * k2, p)
            k4 = _gs_rhs(s + h * k3, p)
            s = s + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(s)) or np.abs(s).max() > 1e6:
        raise GenerationError("gray_scott2d integration blew up; reduce dt or diffusion rates")
    return s


def oracle_step(spec: TrajectorySpec, state: np.ndarray, dt: float | None = None) -> np.ndarray:
    """Advance ``state: [H, W, C]`` by one frame (or ``dt``) with the exact/reference solver."""
    dt = spec.dt if dt is None else dt
    p = spec.params
    if spec.system == "heat2d":
        return _heat_step(state, p["nu"], dt)
    if spec.system == "advection2d":
        return _advect_step(state, p["a"], p["b"], dt)
    return _gs_step(state, p, dt, spec.substeps)


def initial_state(spec: TrajectorySpec, rng: np.random.Generator) -> np.ndarray:
    if spec.system == "gray_scott2d":
        m = band_limited_field(spec.grid, rng)
        m = (m - m.min()) / (m.max() - m.min())
        return np.stack([1.0 - 0.5 * m, 0.25 * m], axis=-1)
    return band_limited_field(spec.grid, rng)[..., None]


def generate(spec: TrajectorySpec, n_traj: int = 1, dataset: str = "") -> TrajectoryBatch:
    """``n_traj`` trajectories; trajectory ``i`` is seeded from ``(spec.seed, i)``."""
    frames = np.empty((n_traj, spec.n_steps, *spec.grid, spec.channels))
    for i in range(n_traj):
        rng = np.random.default_rng([spec.seed, i])
        s = initial_state(spec, rng)
        frames[i, 0] = s
        for t in range(1, spec.n_steps):
            s = oracle_step(spec, s)
            frames[i, t] = s
    return TrajectoryBatch(frames, spec, dataset or spec.system)


# ---------------------------------------------------------------------------
# file io


def header_size(system: str) -> int:
    return _HEADER.size + 8 * len(PARAM_ORDER[system])


def write_trajectories(path, batch: TrajectoryBatch) -> int:
    spec = batch.spec
    n, F, H, W, C = batch.data.shape
    pvals = [float(spec.params[k]) for k in PARAM_ORDER[spec.system]]
    head = _HEADER.pack(
        FILE_MAGIC, FILE_VERSION, SYSTEMS.index(spec.system), n, F, H, W, C, float(spec.dt), spec.seed, len(pvals)
    )
    blob = head + struct.pack(f"<{len(pvals)}d", *pvals) + np.ascontiguousarray(batch.data, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def read_trajectories(path) -> TrajectoryBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, ver, sid, n, F, H, W, C, dt, seed, npar = _HEADER.unpack_from(raw, 0)
    if magic != FILE_MAGIC:
        raise ValueError(f"{path}: not a trajectory file (magic {magic!r})")
    if ver != FILE_VERSION:
        raise ValueError(f"{path}: unsupported trajectory format version {ver}")
    off = _HEADER.size
    pvals = struct.unpack_from(f"<{npar}d", raw, off)
    off += 8 * npar
    system = SYSTEMS[sid]
    data = np.frombuffer(raw, dtype="<f8", count=n * F * H * W * C, offset=off).reshape(n, F, H, W, C)
    spec = TrajectorySpec(system, (H, W), F, dt, dict(zip(PARAM_ORDER[system], pvals)), seed)
    return TrajectoryBatch(data.astype(np.float64), spec)
