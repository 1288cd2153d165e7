"""``wavelit`` command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import checkpoint as ckpt
from . import config as C
from .bench import KINDS, scaling_ratio, sweep
from .experiments import Fixture, ablation_grid, desk_run
from .model import WaveLiT, load_into, param_count
from .rollout import RolloutReport, autoregressive_rollout, model_step
from .sampling import REFERENCE_CORPUS, SamplingConfigError, parse_corpus, sampling_report
from .synthdata import SYSTEMS, GenerationError, TrajectoryBatch, TrajectorySpec, generate, read_trajectories, write_trajectories
from .training import (
    METRIC_COLUMNS,
    LoopConfig,
    Trainer,
    TrainingConfigError,
    TrainingDivergenceError,
    WindowData,
    desk_schedule,
    rollout_finetune,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def thread_count(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("WAVELIT_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise UsageError(f"WAVELIT_THREADS must be an integer, got {env!r}") from None


def _write_text(path: str, text: str, force: bool = True) -> None:
    if os.path.exists(path) and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _load_config(path: str | None) -> C.RunConfig:
    if not path:
        return C.RunConfig()
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    return C.load(path)


class _MetricsWriter:
    def __init__(self, path: str, append: bool = False):
        new = not (append and os.path.exists(path))
        self.fh = open(path, "a" if not new else "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if new:
            self.w.writerow(METRIC_COLUMNS)

    def __call__(self, row: dict) -> None:
        self.w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
        self.fh.flush()

    def close(self):
        self.fh.close()


# ---------------------------------------------------------------------------
# data


def load_fixture(cfg: C.RunConfig) -> Fixture:
    """Training/validation windows from trajectory files or generated systems."""
    d, hist = cfg.data, cfg.model.history
    if d.train_file:
        tr = read_trajectories(d.train_file)
        va = read_trajectories(d.val_file) if d.val_file else tr
    else:
        if not d.systems:
            raise UsageError("data.systems is empty and no data.train_file given")
        trs = [generate(s, d.n_train) for s in d.systems]
        vas = [generate(dataclasses.replace(s, seed=s.seed + 1_000_003), d.n_val) for s in d.systems]
        tr, va = _concat(trs), _concat(vas)
    shape = tr.data.shape[2:]
    if shape != (*cfg.model.grid, cfg.model.in_channels):
        raise UsageError(f"data frames {shape} do not match model grid {cfg.model.grid} x {cfg.model.in_channels} channels")
    return Fixture(WindowData(*tr.windows(hist)), WindowData(*va.windows(hist)), tr, va)


def _concat(batches: list[TrajectoryBatch]) -> TrajectoryBatch:
    if len(batches) == 1:
        return batches[0]
    shapes = {b.data.shape[1:] for b in batches}
    if len(shapes) != 1:
        raise UsageError(f"data systems disagree on trajectory shape: {sorted(shapes)}")
    return TrajectoryBatch(np.concatenate([b.data for b in batches]), batches[0].spec)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(a) -> int:
    params = {}
    for kv in a.param or []:
        k, _, v = kv.partition("=")
        try:
            params[k] = float(v)
        except ValueError:
            raise UsageError(f"--param expects name=value, got {kv!r}") from None
    try:
        spec = TrajectorySpec(a.system, tuple(a.grid), a.steps, a.dt, params, a.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if os.path.exists(a.out) and not a.force:
        raise UsageError(f"{a.out} exists; pass --force to overwrite")
    batch = generate(spec, a.n_traj)
    d = os.path.dirname(a.out)
    if d:
        os.makedirs(d, exist_ok=True)
    n = write_trajectories(a.out, batch)
    data = batch.data
    print(f"{'system':<14}{'grid':<10}{'frames':>7}{'traj':>6}{'bytes':>12}{'min':>11}{'max':>11}")
    print(f"{spec.system:<14}{'x'.join(map(str, spec.grid)):<10}{spec.n_steps:>7}{a.n_traj:>6}{n:>12}{data.min():>11.4g}{data.max():>11.4g}")
    return EXIT_OK


def _trainer_for(cfg: C.RunConfig, loop: LoopConfig | None = None) -> Trainer:
    model = WaveLiT(cfg.model, seed=cfg.training.seed)
    return Trainer(model, loop or cfg.training)


def cmd_train(a) -> int:
    cfg = _load_config(a.config)
    if a.steps is not None:
        cfg.training.steps = a.steps
    out = a.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "config.yaml"), C.dumps(cfg))
    fx = load_fixture(cfg)
    trainer = _trainer_for(cfg)
    if a.resume:
        trainer.load_state(ckpt.load(a.resume))
    last = os.path.join(out, "checkpoint.wlt")

    def on_ckpt(tr):
        tr.save(last)
        _save_ema(tr, os.path.join(out, "ema.wlt"))

    writer = _MetricsWriter(os.path.join(out, "metrics.csv"), append=bool(a.resume))
    print(f"training {param_count(trainer.params)} parameters for {cfg.training.steps} steps -> {out}")
    try:
        trainer.pretrain(fx.train, val=fx.val, on_row=writer, on_checkpoint=on_ckpt)
    except TrainingDivergenceError as e:
        print(f"error: {e}; last checkpoint kept at {last}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        writer.close()
    on_ckpt(trainer)
    print(f"done at step {trainer.step}")
    return EXIT_OK


def _save_ema(tr: Trainer, path: str) -> None:
    ckpt.save(path, {f"param/{k}": v for k, v in tr.ema.items()} | {"meta/step": np.array(float(tr.step))})


def cmd_finetune(a) -> int:
    cfg = _load_config(a.config)
    ft = cfg.finetune
    s = ft.settings
    if a.strategy:
        s = dataclasses.replace(s, strategy=a.strategy)
    if a.unroll is not None:
        s = dataclasses.replace(s, unroll=a.unroll)
    if a.epsilon is not None:
        s = dataclasses.replace(s, epsilon=a.epsilon)
    steps = a.steps if a.steps is not None else ft.steps
    src = a.checkpoint or ft.from_checkpoint
    if not src or not os.path.exists(src):
        raise UsageError(f"finetune needs an existing --checkpoint (got {src!r})")
    out = a.out or os.path.join(cfg.output_dir, "finetune")
    os.makedirs(out, exist_ok=True)
    _write_text(os.path.join(out, "config.yaml"), C.dumps(cfg))
    fx = load_fixture(cfg)
    loop = dataclasses.replace(cfg.training, steps=steps, schedule=desk_schedule(steps, ft.peak_lr))
    trainer = _trainer_for(cfg, loop)
    arrays = ckpt.load(src)
    load_into(trainer.params, ckpt.split(arrays, "param"))
    trainer.ema = {k: t.data.copy() for k, t in trainer.params.items()}
    writer = _MetricsWriter(os.path.join(out, "metrics.csv"))
    try:
        rollout_finetune(trainer, fx.train_trajs.data, s, steps, cfg.model.history, on_row=writer)
    except TrainingDivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingConfigError as e:
        raise UsageError(str(e)) from None
    finally:
        writer.close()
    trainer.save(os.path.join(out, "checkpoint.wlt"))
    _save_ema(trainer, os.path.join(out, "ema.wlt"))
    print(f"finetuned ({s.strategy}, K={s.unroll}) for {steps} steps -> {out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    if not os.path.exists(a.checkpoint):
        raise UsageError(f"checkpoint not found: {a.checkpoint}")
    cfg = _load_config(a.config)
    model = WaveLiT(cfg.model, seed=cfg.training.seed)
    arrays = ckpt.load(a.checkpoint)
    key = "ema" if (cfg.eval.use_ema and not a.no_ema and any(k.startswith("ema/") for k in arrays)) else "param"
    load_into(model.parameters(), ckpt.split(arrays, key))
    if a.data:
        trajs = read_trajectories(a.data).data
    else:
        trajs = load_fixture(cfg).val_trajs.data
    hist = cfg.model.history
    n = a.n_steps or cfg.eval.n_steps or trajs.shape[1] - hist
    if trajs.shape[1] < hist + n:
        raise UsageError(f"trajectories have {trajs.shape[1]} frames, need history {hist} + {n} steps")
    windows = {k: tuple(v) for k, v in cfg.eval.windows.items()}
    report = parallel_rollout(model_step(model), trajs, hist, n, windows, thread_count(a.threads))
    text = report.to_csv()
    if a.out:
        _write_text(a.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def parallel_rollout(step, trajs: np.ndarray, hist: int, n: int, windows, threads: int) -> RolloutReport:
    """Independent rollouts over trajectory chunks, merged in trajectory order."""
    chunks = np.array_split(np.arange(trajs.shape[0]), min(threads, trajs.shape[0]))

    def run(idx):
        t = trajs[idx]
        return autoregressive_rollout(step, t[:, :hist], n, t[:, hist : hist + n], windows)

    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(run, chunks))
    return RolloutReport(
        np.concatenate([p.vrmse for p in parts]),
        np.concatenate([p.rel_l2 for p in parts]),
        np.concatenate([p.abs_l2 for p in parts]),
        np.concatenate([p.diverged for p in parts]),
        dict(windows),
    )


def cmd_bench_attention(a) -> int:
    rows = sweep(a.sizes, a.kinds, a.dim, a.repeats, a.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "kind", "seconds"])
    for n, k, s in rows:
        w.writerow([n, k, f"{s:.6g}"])
    text = buf.getvalue()
    if a.out:
        _write_text(a.out, text)
    sys.stdout.write(text)
    if len(a.sizes) >= 2:
        lo, hi = min(a.sizes), max(a.sizes)
        for k in a.kinds:
            print(f"# {k}: t(N={hi}) / t(N={lo}) = {scaling_ratio(rows, k, lo, hi):.2f}", file=sys.stderr)
    return EXIT_OK


def cmd_sampling_report(a) -> int:
    if a.corpus:
        if not os.path.exists(a.corpus):
            raise UsageError(f"corpus file not found: {a.corpus}")
        with open(a.corpus) as fh:
            try:
                stats = parse_corpus(fh.read())
            except SamplingConfigError as e:
                raise UsageError(f"{a.corpus}: {e}") from None
    else:
        stats = REFERENCE_CORPUS
    rows = sampling_report(stats, a.temperature)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    text = buf.getvalue()
    if a.out:
        _write_text(a.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(a) -> int:
    cfg = _load_config(a.config)
    try:
        grid = ablation_grid(a.axis, cfg.model)
    except ValueError as e:
        raise UsageError(str(e)) from None
    steps = a.steps if a.steps is not None else cfg.training.steps
    fx = load_fixture(cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["axis", "setting", "params", "val_rel_l2", "val_vrmse", "val_wavelet_l1", "val_mse"])
    for label, mcfg, loss in grid:
        try:
            mcfg.validate()
        except ValueError as e:
            raise UsageError(f"{label}: {e}") from None
        try:
            res = desk_run(mcfg, fx, steps, loss, cfg.training.seed, cfg.training.schedule.peak, cfg.training.batch_size, log_every=0)
        except TrainingDivergenceError as e:
            print(f"error: {label}: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        v = res.val
        w.writerow([a.axis, label, param_count(res.trainer.params), repr(v["rel_l2"]), repr(v["vrmse_median"]), repr(res.val_wavelet_l1), repr(v["loss_mse"])])
        print(f"{label}: rel_l2 {v['rel_l2']:.4g}, wavelet_l1 {res.val_wavelet_l1:.4g}", file=sys.stderr)
    text = buf.getvalue()
    if a.out:
        _write_text(a.out, text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_config(a) -> int:
    if a.validate:
        cfg = _load_config(a.validate)
        print(f"{a.validate}: ok")
        if a.print_defaults:
            sys.stdout.write(C.dumps(cfg))
        return EXIT_OK
    sys.stdout.write(C.dumps(C.RunConfig()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavelit", description="Wavelet-token linear-attention PDE surrogates at desk scale.")
    p.add_argument("--threads", type=int, default=None, help="evaluation parallelism (default: $WAVELIT_THREADS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic trajectories")
    g.add_argument("--system", choices=SYSTEMS, default="heat2d")
    g.add_argument("--grid", type=int, nargs=2, default=[32, 32], metavar=("H", "W"))
    g.add_argument("--steps", type=int, default=64, help="stored frames per trajectory, initial one included")
    g.add_argument("--dt", type=float, default=1.0)
    g.add_argument("--n-traj", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--param", action="append", help="physical parameter, e.g. nu=0.002 (repeatable)")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="teacher-forced pretraining")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    f = sub.add_parser("finetune", help="rollout finetuning from a checkpoint")
    f.add_argument("--config")
    f.add_argument("--checkpoint")
    f.add_argument("--out")
    f.add_argument("--steps", type=int)
    f.add_argument("--strategy", choices=("scheduled_sampling", "bptt", "causal_bptt", "pushforward"))
    f.add_argument("--unroll", type=int)
    f.add_argument("--epsilon", type=float)
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="autoregressive rollout report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--data", help="trajectory file (default: the config's validation set)")
    e.add_argument("--n-steps", type=int, default=0)
    e.add_argument("--no-ema", action="store_true")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench-attention", help="time linear vs softmax attention")
    b.add_argument("--sizes", type=int, nargs="+", default=[1024, 4096])
    b.add_argument("--kinds", nargs="+", choices=KINDS, default=["linear", "softmax"])
    b.add_argument("--dim", type=int, default=32)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(fn=cmd_bench_attention)

    s = sub.add_parser("sampling-report", help="dataset sampling diagnostics")
    s.add_argument("--corpus", help="CSV: name,n_trajectories,height,width[,dwt_levels] (default: reference table)")
    s.add_argument("--temperature", type=float, default=0.2)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sampling_report)

    ab = sub.add_parser("ablate", help="desk-scale ablation sweep")
    ab.add_argument("--config")
    ab.add_argument("--axis", required=True, help="wavelet | loss | fpn | mixer")
    ab.add_argument("--steps", type=int)
    ab.add_argument("--out")
    ab.set_defaults(fn=cmd_ablate)

    c = sub.add_parser("config", help="print or validate run configs")
    c.add_argument("--print-defaults", action="store_true")
    c.add_argument("--validate", metavar="PATH")
    c.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    try:
        a.threads = thread_count(a.threads)
        return a.fn(a)
    except (UsageError, C.ConfigError, ckpt.CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergenceError, GenerationError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
