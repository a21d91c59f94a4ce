"""Timing helpers: full fits by problem size, and compiled versus Python kernels."""
from __future__ import annotations

import time
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from sifa import _backend
from sifa.core import FitOptions, RankSet
from sifa.em import fit
from sifa.simulate import SimSpec, gen_setting


@dataclass
class FitTiming:
    n: int
    dims: tuple
    q: int
    mode: str
    entries: int
    times: list
    iterations: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.times))

    @property
    def sd(self) -> float:
        return float(np.std(self.times, ddof=1)) if len(self.times) > 1 else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean_seconds=self.mean, sd_seconds=self.sd, min_seconds=min(self.times))
        return d


def parse_size(text: str) -> tuple:
    """``"n,p1,...,pK,q"`` -> ``(n, (p1, ..., pK), q)``."""
    vals = [int(t) for t in text.split(",") if t.strip()]
    if len(vals) < 4:
        raise ValueError(f"size needs n, at least two view dimensions and q: {text!r}")
    if min(vals) < 1:
        raise ValueError(f"sizes must be positive: {text!r}")
    return vals[0], tuple(vals[1:-1]), vals[-1]


def time_fits(sizes: Sequence[tuple], modes=("orthogonal", "general"), repeats: int = 3,
              ranks: RankSet = RankSet(2, (3, 3)), seed: int = 0, tol: float = 1e-6) -> list:
    """Wall-clock fit times on simulated data with the default rank set.

    Each (size, mode) pair is fit ``repeats`` times on the same data.  The
    total entry count n * sum(p) is the size axis of the report.
    """
    out = []
    for n, dims, q in sizes:
        rs = RankSet(ranks.r0, tuple(ranks.r[:1]) * len(dims)) if len(dims) != ranks.K else ranks
        spec = SimSpec(setting="custom", n=n, dims=dims, q=q, ranks=rs, seed=seed)
        data, _ = gen_setting(spec)
        for mode in modes:
            opts = FitOptions(mode=mode, tol=tol, seed=seed)
            times, iters = [], 0
            for _ in range(repeats):
                t0 = time.perf_counter()
                rep = fit(data, rs, opts, structure=False)
                times.append(time.perf_counter() - t0)
                iters = rep.iterations
            out.append(FitTiming(n, dims, q, mode, n * sum(dims), times, iters))
    return out


def time_kernels(n: int = 400, q: int = 50, q_kernel: int = 2, repeats: int = 3,
                 seed: int = 0) -> list:
    """Best-of-``repeats`` times of each kernel in both backends.

    Returns dicts with ``kernel``, ``backend`` and ``seconds``.  The compiled
    rows are missing when the extension is not built.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, q))
    y = X[:, :5] @ rng.standard_normal(5) + rng.standard_normal(n)
    col_sq = np.einsum("ij,ij->j", X, X) / n
    lam = 0.05 * float(np.max(np.abs(X.T @ y)) / n)
    Xk = rng.uniform(-1, 1, (n, q_kernel))
    Yk = np.sin(np.pi * Xk[:, :1]) + 0.1 * rng.standard_normal((n, 3))
    h = np.full(q_kernel, 0.2)

    backends = [("python", _backend.python_kernels)]
    if _backend.compiled_kernels is not None:
        backends.append(("compiled", _backend.compiled_kernels))
    rows = []
    for name, mod in backends:
        def lasso():
            mod.lasso_cd(np.asfortranarray(X), y, lam, np.zeros(q), col_sq, 1e-8, 10000)

        def smooth():
            mod.nw_smooth(Xk, Yk, h, Xk, True)

        for kname, fn in (("lasso_cd", lasso), ("nw_smooth", smooth)):
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                best = min(best, time.perf_counter() - t0)
            rows.append({"kernel": kname, "backend": name, "seconds": best})
    return rows
