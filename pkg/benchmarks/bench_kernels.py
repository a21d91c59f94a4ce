"""Compare the compiled and pure-Python regression kernels, then time full fits.

Run with ``python3 benchmarks/bench_kernels.py``.  The compiled rows are
absent when the extension has not been built.
"""
import argparse

from sifa import _backend
from sifa.bench import parse_size, time_fits, time_kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--q", type=int, default=50)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--sizes", nargs="*", default=["200,100,100,10", "500,200,200,10"])
    args = ap.parse_args()

    print(f"compiled extension available: {_backend.compiled_kernels is not None}")
    rows = time_kernels(n=args.n, q=args.q, repeats=args.repeats)
    by = {(r["kernel"], r["backend"]): r["seconds"] for r in rows}
    print(f"{'kernel':<10} {'python s':>10} {'compiled s':>11} {'speed-up':>9}")
    for k in ("lasso_cd", "nw_smooth"):
        py, c = by[(k, "python")], by.get((k, "compiled"))
        if c is None:
            print(f"{k:<10} {py:>10.4f} {'-':>11} {'-':>9}")
        else:
            print(f"{k:<10} {py:>10.4f} {c:>11.4f} {py / c:>8.1f}x")

    print(f"\n{'size':<18} {'mode':<11} {'mean s':>8} {'sd s':>7} {'iters':>6}")
    for t in time_fits([parse_size(s) for s in args.sizes], repeats=args.repeats):
        size = f"{t.n}x{'+'.join(map(str, t.dims))},q={t.q}"
        print(f"{size:<18} {t.mode:<11} {t.mean:>8.3f} {t.sd:>7.3f} {t.iterations:>6}")


if __name__ == "__main__":
    main()
