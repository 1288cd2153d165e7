"""Desk-scale experiment drivers shared by the CLI, the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .mixer import ABLATIONS
from .model import WaveLiT, WaveLiTConfig, named_config
from .objectives import LossWeights, wavelet_l1
from .synthdata import TrajectoryBatch, TrajectorySpec, generate
from .tensor import no_grad
from .training import LoopConfig, Trainer, WindowData, desk_schedule

ABLATION_AXES = ("wavelet", "loss", "fpn", "mixer")


@dataclass
class Fixture:
    train: WindowData
    val: WindowData
    train_trajs: TrajectoryBatch
    val_trajs: TrajectoryBatch


def data_fixture(spec: TrajectorySpec, n_train: int, n_val: int, history: int) -> Fixture:
    """Train and validation trajectories from disjoint seeds, cut into windows."""
    tr = generate(spec, n_train)
    va = generate(replace(spec, seed=spec.seed + 1_000_003), n_val)
    return Fixture(WindowData(*tr.windows(history)), WindowData(*va.windows(history)), tr, va)


def heat_fixture(n_train: int = 200, n_val: int = 20, grid=(32, 32), n_frames: int = 16, nu: float = 0.002, seed: int = 0, history: int = 4) -> Fixture:
    spec = TrajectorySpec("heat2d", grid, n_frames, 1.0, {"nu": nu}, seed)
    return data_fixture(spec, n_train, n_val, history)


def eval_wavelet_l1(trainer: Trainer, data: WindowData, use_ema: bool = True, batch: int = 64) -> float:
    """Mean absolute subband-coefficient error over ``data``."""
    if use_ema:
        trainer.swap_ema()
    try:
        total, count = 0.0, 0
        with no_grad():
            for i in range(0, len(data), batch):
                p = trainer.forward(data.x[i : i + batch])
                n = p.size
                total += float(wavelet_l1(p, data.y[i : i + batch], trainer.wavelet).data) * n
                count += n
    finally:
        if use_ema:
            trainer.swap_ema()
    return total / count


@dataclass
class DeskResult:
    trainer: Trainer
    rows: list
    val: dict
    val_wavelet_l1: float
    seconds: float
    extra: dict = field(default_factory=dict)


def desk_run(model_cfg: WaveLiTConfig, fixture: Fixture, steps: int, loss: LossWeights = LossWeights(), seed: int = 0, peak_lr: float = 3e-3, batch_size: int = 4, log_every: int = 50, on_row=None) -> DeskResult:
    loop = LoopConfig(steps=steps, batch_size=batch_size, seed=seed, schedule=desk_schedule(steps, peak_lr), loss=loss, log_every=log_every)
    trainer = Trainer(WaveLiT(model_cfg, seed=seed), loop)
    t0 = time.perf_counter()
    rows = trainer.pretrain(fixture.train, on_row=on_row)
    secs = time.perf_counter() - t0
    val = trainer.evaluate(fixture.val)
    wl1 = eval_wavelet_l1(trainer, fixture.val)
    return DeskResult(trainer, rows, val, wl1, secs)


def ablation_grid(axis: str, base: WaveLiTConfig) -> list[tuple[str, WaveLiTConfig, LossWeights]]:
    """(label, model config, loss weights) rows for one ablation axis."""
    if axis == "wavelet":
        return [(w, replace(base, wavelet=w), LossWeights()) for w in ("haar", "bior2.2", "bior4.4")]
    if axis == "loss":
        return [(f"({a:g},{b:g})", base, LossWeights(a, b)) for a, b in ((1, 0), (0, 1), (1, 1))]
    if axis == "fpn":
        return [(f"L={L}", replace(base, fpn_levels=L), LossWeights()) for L in (0, 1, 2)]
    if axis == "mixer":
        return [(name, replace(base, flags=f), LossWeights()) for name, f in ABLATIONS.items()]
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def tiny_heat_config(**kw) -> WaveLiTConfig:
    return named_config("wavelit-tiny", **kw)
