"""AdamW, warmup + exponential-decay schedule, EMA, and the training loops.

Randomness is derived per step from ``(seed, stream, step)`` so that a run
resumed from a checkpoint at step ``k`` draws exactly the batches and
teacher-forcing coins of the uninterrupted run.
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .objectives import LossWeights, loss_terms, relative_l2, vrmse
from .tensor import Tensor, backward, clip_by_global_norm, no_grad

METRIC_COLUMNS = ("step", "split", "loss_mse", "loss_wavelet", "lr", "grad_norm", "vrmse_median", "rel_l2")
STRATEGIES = ("scheduled_sampling", "bptt", "causal_bptt", "pushforward")

# named random sub-streams
STREAM_DATA = 1
STREAM_TEACHER = 2
STREAM_FINETUNE_DATA = 3


class TrainingDivergenceError(FloatingPointError):
    pass


class TrainingConfigError(ValueError):
    pass


def stream_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


# ---------------------------------------------------------------------------
# schedule


@dataclass
class ScheduleConfig:
    warmup_start: float = 1e-7
    peak: float = 1e-3
    warmup_steps: int = 5000
    decay_rate: float = 0.99
    transition_steps: int = 2000
    staircase: bool = False

    def __post_init__(self):
        if not self.peak > self.warmup_start > 0:
            raise TrainingConfigError("schedule needs peak > warmup_start > 0")
        if self.warmup_steps < 0 or self.transition_steps < 1:
            raise TrainingConfigError("warmup_steps >= 0 and transition_steps >= 1 required")
        if not 0 < self.decay_rate <= 1:
            raise TrainingConfigError("decay_rate must lie in (0, 1]")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.warmup_start + (cfg.peak - cfg.warmup_start) * step / cfg.warmup_steps
    e = (step - cfg.warmup_steps) / cfg.transition_steps
    if cfg.staircase:
        e = math.floor(e)
    return cfg.peak * cfg.decay_rate**e


# ---------------------------------------------------------------------------
# optimizer and EMA


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, Tensor], **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()}, {k: np.zeros_like(t.data) for k, t in params.items()}, **kw)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.step, 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.DimensionError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        upd = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = p.data - lr * state.weight_decay * p.data - lr * upd


def ema_update(ema: dict[str, np.ndarray], params: dict[str, Tensor], decay: float) -> None:
    if not 0 <= decay < 1:
        raise ValueError("EMA decay must lie in [0, 1)")
    for name, p in params.items():
        ema[name] = decay * ema[name] + (1.0 - decay) * p.data


# ---------------------------------------------------------------------------
# data


@dataclass
class WindowData:
    """Teacher-forced pairs ``x: [M, T, H, W, C]`` -> ``y: [M, 1, H, W, C]``."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)

    def batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self.x), size=size)
        return self.x[idx], self.y[idx]


class Prefetcher:
    """Produces ``make(step)`` for consecutive steps on a worker thread.

    At most ``depth`` finished batches wait in the queue; order is preserved,
    so the consumer sees exactly the sequence a synchronous loop would.
    """

    def __init__(self, make: Callable[[int], object], start: int, stop: int, depth: int = 2):
        self.q: queue.Queue = queue.Queue(maxsize=depth)
        self._t = threading.Thread(target=self._run, args=(make, start, stop), daemon=True)
        self._t.start()

    def _run(self, make, start, stop):
        for s in range(start, stop):
            self.q.put(make(s))

    def __iter__(self) -> Iterator:
        return self

    def __next__(self):
        return self.q.get()


# ---------------------------------------------------------------------------
# trainer


@dataclass
class LoopConfig:
    steps: int = 5000
    batch_size: int = 4
    clip_norm: float = 1.0
    ema_decay: float = 0.999
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    log_every: int = 1
    eval_every: int = 0
    checkpoint_every: int = 0
    prefetch: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleConfig(**self.schedule)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        if self.steps < 0 or self.batch_size < 1:
            raise TrainingConfigError("steps >= 0 and batch_size >= 1 required")


def desk_schedule(total_steps: int, peak: float = 1e-3) -> ScheduleConfig:
    """Paper-shaped schedule compressed to ``total_steps``: 1% warmup, decay to ~0.99^100 at the end."""
    warm = max(1, total_steps // 100)
    return ScheduleConfig(warmup_start=peak * 1e-4, peak=peak, warmup_steps=warm, transition_steps=max(1, (total_steps - warm) // 100))


class Trainer:
    """Owns the parameters' optimizer state and EMA; the model owns the parameters."""

    def __init__(self, model, cfg: LoopConfig, forward: Callable[[np.ndarray], Tensor] | None = None):
        self.model = model
        self.cfg = cfg
        self.forward = forward or model
        self.params = model.parameters()
        self.opt = OptimizerState.zeros_like(self.params)
        self.ema = {k: t.data.copy() for k, t in self.params.items()}
        self.step = 0
        self.wavelet = getattr(getattr(model, "cfg", None), "wavelet", "bior2.2")

    # -- state ------------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, t in self.params.items():
            out[f"param/{k}"] = t.data
        for k in self.params:
            out[f"adam_m/{k}"] = self.opt.m[k]
            out[f"adam_v/{k}"] = self.opt.v[k]
            out[f"ema/{k}"] = self.ema[k]
        out["meta/step"] = np.array(float(self.step))
        out["meta/adam_step"] = np.array(float(self.opt.step))
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        from .model import load_into

        load_into(self.params, ckpt.split(arrays, "param"))
        self.opt.m = {k: v.copy() for k, v in ckpt.split(arrays, "adam_m").items()}
        self.opt.v = {k: v.copy() for k, v in ckpt.split(arrays, "adam_v").items()}
        self.ema = {k: v.copy() for k, v in ckpt.split(arrays, "ema").items()}
        self.step = int(arrays["meta/step"])
        self.opt.step = int(arrays["meta/adam_step"])

    def save(self, path) -> None:
        ckpt.save(path, self.state_arrays())

    def swap_ema(self) -> None:
        """Exchange live parameters and EMA copies (call twice to undo)."""
        for k, t in self.params.items():
            t.data, self.ema[k] = self.ema[k], t.data

    # -- steps ------------------------------------------------------------

    def _apply(self, loss: Tensor, lr: float) -> float:
        if not np.isfinite(loss.data):
            raise TrainingDivergenceError(f"non-finite loss at step {self.step}")
        for t in self.params.values():
            t.grad = None
        backward(loss)
        names = list(self.params)
        grads = [self.params[k].grad if self.params[k].grad is not None else np.zeros_like(self.params[k].data) for k in names]
        clipped, norm = clip_by_global_norm(grads, self.cfg.clip_norm)
        adamw_step(self.params, dict(zip(names, clipped)), self.opt, lr)
        ema_update(self.ema, self.params, self.cfg.ema_decay)
        for t in self.params.values():
            t.grad = None
        return norm

    def train_step(self, xb: np.ndarray, yb: np.ndarray) -> dict:
        lr = lr_at(self.step, self.cfg.schedule)
        pred = self.forward(xb)
        total, mse, wl1 = loss_terms(pred, yb, self.wavelet, self.cfg.loss)
        norm = self._apply(total, lr)
        row = _row(self.step, "train", mse, wl1, lr, norm, pred.data, yb)
        self.step += 1
        return row

    def evaluate(self, data: WindowData, use_ema: bool = True, batch: int = 64) -> dict:
        """Teacher-forced one-step metrics over all of ``data``."""
        if use_ema:
            self.swap_ema()
        try:
            preds = []
            with no_grad():
                for i in range(0, len(data), batch):
                    preds.append(self.forward(data.x[i : i + batch]).data)
            pred = np.concatenate(preds)
        finally:
            if use_ema:
                self.swap_ema()
        return one_step_metrics(pred, data.y, self.wavelet, self.cfg.loss, self.step)

    def pretrain(
        self,
        data: WindowData,
        steps: int | None = None,
        val: WindowData | None = None,
        on_row: Callable[[dict], None] | None = None,
        on_checkpoint: Callable[["Trainer"], None] | None = None,
    ) -> list[dict]:
        """Run until ``self.step == steps`` (default ``cfg.steps``); returns metric rows."""
        cfg = self.cfg
        stop = cfg.steps if steps is None else steps
        rows = []

        def make(s):
            return data.batch(stream_rng(cfg.seed, STREAM_DATA, s), cfg.batch_size)

        batches = Prefetcher(make, self.step, stop, cfg.prefetch) if cfg.prefetch > 0 else None
        while self.step < stop:
            xb, yb = next(batches) if batches else make(self.step)
            row = self.train_step(xb, yb)
            if cfg.log_every and (row["step"] % cfg.log_every == 0 or self.step == stop):
                rows.append(row)
                if on_row:
                    on_row(row)
            if val is not None and cfg.eval_every and (self.step % cfg.eval_every == 0 or self.step == stop):
                vrow = self.evaluate(val)
                rows.append(vrow)
                if on_row:
                    on_row(vrow)
            if on_checkpoint and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                on_checkpoint(self)
        return rows


def _row(step, split, mse, wl1, lr, norm, pred, target) -> dict:
    try:
        v = vrmse(pred, target)
    except ArithmeticError:
        v = float("nan")
    return {
        "step": step,
        "split": split,
        "loss_mse": float(mse.data),
        "loss_wavelet": float(wl1.data),
        "lr": lr,
        "grad_norm": norm,
        "vrmse_median": v,
        "rel_l2": relative_l2(pred, target),
    }


def one_step_metrics(pred, target, wavelet="bior2.2", weights: LossWeights = LossWeights(), step: int = 0) -> dict:
    """Losses plus median-over-samples VRMSE and relative L2."""
    with no_grad():
        _, mse, wl1 = loss_terms(pred, target, wavelet, weights)
    v = [vrmse(p, t) for p, t in zip(pred, target)]
    r = [relative_l2(p, t) for p, t in zip(pred, target)]
    return {
        "step": step,
        "split": "val",
        "loss_mse": float(mse.data),
        "loss_wavelet": float(wl1.data),
        "lr": float("nan"),
        "grad_norm": float("nan"),
        "vrmse_median": float(np.median(v)),
        "rel_l2": float(np.median(r)),
    }


# ---------------------------------------------------------------------------
# rollout finetuning


@dataclass
class FinetuneConfig:
    strategy: str = "scheduled_sampling"
    unroll: int = 8
    epsilon: float = 0.0
    tf_start: float = 1.0
    tf_end: float = 0.1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise TrainingConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.unroll < 1:
            raise TrainingConfigError("unroll K must be >= 1")
        if self.epsilon < 0:
            raise TrainingConfigError("epsilon must be >= 0")
        if not (0 <= self.tf_end <= 1 and 0 <= self.tf_start <= 1):
            raise TrainingConfigError("teacher-forcing probabilities must lie in [0, 1]")


def teacher_forcing_prob(step: int, total_steps: int, cfg: FinetuneConfig) -> float:
    """Linear from ``tf_start`` at step 0 to ``tf_end`` at step ``total_steps - 1``."""
    if total_steps <= 1:
        return cfg.tf_start
    a = min(max(step / (total_steps - 1), 0.0), 1.0)
    if a == 1.0:
        return cfg.tf_end
    return cfg.tf_start + (cfg.tf_end - cfg.tf_start) * a


def causal_weights(step_losses, epsilon: float) -> np.ndarray:
    """``w_i = exp(-eps * sum_{k<i} L_k)`` from detached losses.

    Evaluated as a running product of ``exp(-eps * L_k)`` so that equal losses
    give exact powers of one factor.
    """
    L = np.asarray(step_losses, dtype=np.float64)
    if L.size == 0:
        return L
    return np.concatenate([[1.0], np.cumprod(np.exp(-epsilon * L[:-1]))])


@dataclass
class UnrollResult:
    loss: Tensor
    step_losses: list[float]
    weights: np.ndarray
    mse: float
    wavelet: float
    last_pred: np.ndarray


def unroll_loss(
    forward: Callable,
    window: np.ndarray,
    history: int,
    cfg: FinetuneConfig,
    tf_prob: float = 0.0,
    rng: np.random.Generator | None = None,
    wavelet: str = "bior2.2",
    weights: LossWeights = LossWeights(),
) -> UnrollResult:
    """Unroll ``cfg.unroll`` steps over ``window: [B, history + K, H, W, C]``."""
    K = cfg.unroll
    if window.shape[1] < history + K:
        raise TrainingConfigError(f"window of {window.shape[1]} frames is shorter than history {history} + K {K}")
    hist: Tensor = T.as_tensor(window[:, :history])
    losses: list[Tensor] = []
    mses, wls = [], []
    pred = None
    for i in range(K):
        target = window[:, history + i : history + i + 1]
        last = i == K - 1
        if cfg.strategy == "pushforward" and not last:
            with no_grad():
                pred = forward(hist.data)
            pred = Tensor(pred.data)
            with no_grad():
                _, m, w = loss_terms(pred, target, wavelet, weights)
            mses.append(float(m.data))
            wls.append(float(w.data))
        else:
            pred = forward(hist)
            total, m, w = loss_terms(pred, target, wavelet, weights)
            losses.append(total)
            mses.append(float(m.data))
            wls.append(float(w.data))
        if last:
            break
        nxt = pred
        if cfg.strategy == "scheduled_sampling" and tf_prob > 0:
            B = window.shape[0]
            coins = (rng.random(B) < tf_prob).astype(np.float64)
            mask = np.broadcast_to(coins[:, None, None, None, None], pred.shape).copy()
            nxt = pred * Tensor(1.0 - mask) + Tensor(mask * target)
        hist = T.concat([hist[:, 1:], nxt], axis=1)
    detached = [float(l.data) for l in losses]
    if cfg.strategy == "causal_bptt":
        w = causal_weights(detached, cfg.epsilon)
        total = None
        for wi, li in zip(w, losses):
            term = T.scale(li, float(wi))
            total = term if total is None else total + term
    else:
        w = np.ones(len(losses))
        total = losses[0]
        for li in losses[1:]:
            total = total + li
    return UnrollResult(total, detached, w, float(np.sum(mses)), float(np.sum(wls)), pred.data)


def trajectory_windows(trajs: np.ndarray, rng: np.random.Generator, size: int, length: int) -> np.ndarray:
    n, F = trajs.shape[:2]
    if F < length:
        raise TrainingConfigError(f"trajectories have {F} frames, unroll needs {length}")
    ti = rng.integers(0, n, size=size)
    si = rng.integers(0, F - length + 1, size=size)
    return np.stack([trajs[a, b : b + length] for a, b in zip(ti, si)])


def rollout_finetune(
    trainer: Trainer,
    trajs: np.ndarray,
    ft: FinetuneConfig,
    steps: int,
    history: int,
    on_row: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Finetune for ``steps`` optimizer steps starting at ``trainer.step``."""
    cfg = trainer.cfg
    if trajs.shape[1] < history + ft.unroll:
        raise TrainingConfigError(f"trajectories have {trajs.shape[1]} frames; history + K = {history + ft.unroll}")
    rows = []
    while trainer.step < steps:
        s = trainer.step
        win = trajectory_windows(trajs, stream_rng(cfg.seed, STREAM_FINETUNE_DATA, s), cfg.batch_size, history + ft.unroll)
        p = teacher_forcing_prob(s, steps, ft) if ft.strategy == "scheduled_sampling" else 0.0
        lr = lr_at(s, cfg.schedule)
        res = unroll_loss(trainer.forward, win, history, ft, p, stream_rng(cfg.seed, STREAM_TEACHER, s), trainer.wavelet, cfg.loss)
        norm = trainer._apply(res.loss, lr)
        target = win[:, -1:]
        row = {
            "step": s,
            "split": "finetune",
            "loss_mse": res.mse,
            "loss_wavelet": res.wavelet,
            "lr": lr,
            "grad_norm": norm,
            "vrmse_median": vrmse(res.last_pred, target),
            "rel_l2": relative_l2(res.last_pred, target),
        }
        trainer.step += 1
        rows.append(row)
        if on_row:
            on_row(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(_cell(r[c]) for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
