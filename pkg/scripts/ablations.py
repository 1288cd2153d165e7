"""Run one or more desk-scale ablation axes and write a combined CSV.

    python3 scripts/ablations.py --axes loss wavelet --steps 1000
"""

import argparse
import csv
import sys

from wavelit.experiments import ABLATION_AXES, ablation_grid, desk_run, heat_fixture, tiny_heat_config
from wavelit.model import param_count


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--axes", nargs="+", choices=ABLATION_AXES, default=list(ABLATION_AXES))
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    a = p.parse_args()

    fx = heat_fixture(n_train=a.n_train, seed=a.seed)
    fh = sys.stdout if a.out == "-" else open(a.out, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["axis", "setting", "params", "val_rel_l2", "val_vrmse", "val_wavelet_l1", "seconds"])
    for axis in a.axes:
        for label, cfg, loss in ablation_grid(axis, tiny_heat_config()):
            res = desk_run(cfg, fx, a.steps, loss, a.seed, log_every=0)
            v = res.val
            w.writerow([axis, label, param_count(res.trainer.params), v["rel_l2"], v["vrmse_median"], res.val_wavelet_l1, round(res.seconds, 1)])
            fh.flush()
    if fh is not sys.stdout:
        fh.close()


if __name__ == "__main__":
    main()
