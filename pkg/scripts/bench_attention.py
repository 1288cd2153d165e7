"""Forward+backward timing of linear vs softmax attention over token counts.

    python3 scripts/bench_attention.py --sizes 256 1024 4096
"""

import argparse

from wavelit.bench import KINDS, scaling_ratio, sweep


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[256, 1024, 4096])
    p.add_argument("--kinds", nargs="+", choices=KINDS, default=list(KINDS))
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    a = p.parse_args()

    rows = sweep(a.sizes, a.kinds, a.dim, a.repeats)
    print(f"{'N':>6}  {'kind':<8}{'seconds':>10}")
    for n, kind, s in rows:
        print(f"{n:>6}  {kind:<8}{s:>10.4f}")
    lo, hi = min(a.sizes), max(a.sizes)
    for kind in a.kinds:
        print(f"{kind}: x{scaling_ratio(rows, kind, lo, hi):.2f} from N={lo} to N={hi}")


if __name__ == "__main__":
    main()
