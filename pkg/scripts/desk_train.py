"""Train wavelit-tiny on synthetic heat2d and report validation metrics.

    python3 scripts/desk_train.py --steps 5000 --out runs/desk
"""

import argparse
import os

from wavelit.experiments import desk_run, heat_fixture, tiny_heat_config
from wavelit.objectives import LossWeights
from wavelit.training import rows_to_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--peak-lr", type=float, default=3e-3)
    p.add_argument("--lambda-mse", type=float, default=1.0)
    p.add_argument("--lambda-l1", type=float, default=1.0)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/desk")
    a = p.parse_args()

    fx = heat_fixture(n_train=a.n_train, seed=a.seed)

    def show(row):
        if row["step"] % 500 == 0:
            print(f"step {row['step']:>5}  mse {row['loss_mse']:.3e}  wl1 {row['loss_wavelet']:.3e}  lr {row['lr']:.2e}", flush=True)

    res = desk_run(tiny_heat_config(), fx, a.steps, LossWeights(a.lambda_mse, a.lambda_l1), a.seed, a.peak_lr, on_row=show)
    os.makedirs(a.out, exist_ok=True)
    with open(os.path.join(a.out, "metrics.csv"), "w") as fh:
        fh.write(rows_to_csv(res.rows + [res.val]))
    res.trainer.save(os.path.join(a.out, "checkpoint.wlt"))
    print(f"val rel L2 {res.val['rel_l2']:.4f}  vrmse {res.val['vrmse_median']:.4f}  wavelet L1 {res.val_wavelet_l1:.3e}  ({res.seconds:.0f}s)")


if __name__ == "__main__":
    main()
