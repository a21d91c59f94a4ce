"""Rank estimation: the two-step crude estimate and likelihood cross-validation."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sifa.core import FitOptions, MultiViewDataset, RankSet
from sifa.em import fit, log_likelihood

TIE_RTOL = 1e-10


def estimate_signal_rank(Y: np.ndarray, threshold: float = 0.9) -> int:
    """Smallest r whose top-r singular values explain at least ``threshold`` of the variance.

    The matrix is column-centered first.  A zero matrix has rank 0.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    Y = np.asarray(Y, dtype=float)
    Y = Y - Y.mean(axis=0)
    d2 = np.linalg.svd(Y, compute_uv=False) ** 2
    total = d2.sum()
    if total == 0.0:
        return 0
    frac = np.cumsum(d2) / total
    # Guard against the last cumulative fraction rounding to just under 1.
    return int(min(np.searchsorted(frac, threshold * (1 - 1e-12)) + 1, d2.size))


def two_step_ranks(r_total_star: int, r_star: Sequence[int]) -> RankSet:
    """Joint and individual ranks from the concatenated and per-view signal ranks.

    r0 = (sum(r_star) - r_total_star) / (K - 1) rounded half up and clamped at
    zero; each r_k = r_star_k - r0, clamped at zero.
    """
    K = len(r_star)
    if K < 2:
        raise ValueError("the two-step estimate needs at least two views")
    raw = (sum(r_star) - r_total_star) / (K - 1)
    r0 = max(int(math.floor(raw + 0.5)), 0)
    return RankSet(r0, tuple(max(int(r) - r0, 0) for r in r_star))


def crude_ranks(data: MultiViewDataset, threshold: float = 0.9) -> RankSet:
    """Two-step estimate with every signal rank from the variance-explained rule."""
    r_total = estimate_signal_rank(data.stacked(), threshold)
    return two_step_ranks(r_total, [estimate_signal_rank(Y, threshold) for Y in data.arrays()])


def neighbor_ranks(center: RankSet, dims: Sequence[int] | None = None,
                   n: int | None = None) -> list[RankSet]:
    """All rank sets within +-1 of ``center`` in every coordinate.

    Negative entries are dropped, and when ``dims`` and ``n`` are given so are
    sets that violate the rank constraints.  ``center`` comes first.
    """
    steps = [(-1, 0, 1)] * (center.K + 1)
    out = [center]
    for delta in itertools.product(*steps):
        vals = [a + d for a, d in zip(center.all(), delta)]
        if any(v < 0 for v in vals) or not any(delta):
            continue
        rs = RankSet(vals[0], tuple(vals[1:]))
        if dims is not None and n is not None and rs.violations(dims, n):
            continue
        out.append(rs)
    return out


@dataclass(frozen=True)
class RankCandidates:
    sets: tuple
    folds: int = 10

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))
        if not self.sets:
            raise ValueError("need at least one candidate rank set")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if len({s.K for s in self.sets}) != 1:
            raise ValueError("candidate rank sets disagree on the number of views")


@dataclass
class LcvResult:
    """Held-out negative log-likelihoods per candidate and fold.

    ``flags[i][j]`` is True when the fit of candidate i on fold j stopped at
    the iteration cap; its score is then the final iterate's likelihood.
    """

    candidates: RankCandidates
    scores: np.ndarray
    flags: np.ndarray
    means: np.ndarray = field(init=False)
    best: int = field(init=False)

    def __post_init__(self):
        self.means = self.scores.mean(axis=1)
        self.best = select_best(self.means, self.candidates.sets)

    @property
    def best_ranks(self) -> RankSet:
        return self.candidates.sets[self.best]

    def margins(self) -> np.ndarray:
        """Mean score of every candidate minus the best mean."""
        return self.means - self.means[self.best]


def select_best(means: np.ndarray, sets: Sequence[RankSet]) -> int:
    """Index of the smallest mean; near ties go to the smallest total rank, then to the first."""
    means = np.asarray(means, dtype=float)
    lo = float(np.min(means))
    tied = np.flatnonzero(means - lo <= TIE_RTOL * max(abs(lo), 1.0))
    return int(min(tied, key=lambda i: (sets[i].total, i)))


def fold_partition(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Uniformly random, near-equal folds of ``range(n)``; deterministic in ``seed``."""
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def lcv(data: MultiViewDataset, candidates: RankCandidates,
        options: FitOptions = FitOptions()) -> LcvResult:
    """N-fold likelihood cross-validation over candidate rank sets.

    Every candidate uses the same partition.  For each fold the model is fit
    on the remaining rows, and the score is minus the marginal log-likelihood
    of the held-out rows, with the fitted covariate functions evaluated at the
    held-out covariates.
    """
    n = data.n
    N = candidates.folds
    if n < 2 * N:
        raise ValueError(f"LCV needs n >= 2*folds (n={n}, folds={N})")
    for rs in candidates.sets:
        rs.check(data.dims, n - int(math.ceil(n / N)))
    parts = fold_partition(n, N, options.seed)
    orth = options.mode == "orthogonal"
    C = len(candidates.sets)
    scores = np.zeros((C, N))
    flags = np.zeros((C, N), dtype=bool)
    for j, test in enumerate(parts):
        train = np.setdiff1d(np.arange(n), test, assume_unique=True)
        dtrain, dtest = data.rows(train), data.rows(test)
        for i, rs in enumerate(candidates.sets):
            rep = fit(dtrain, rs, options, structure=False)
            if not rep.converged:
                flags[i, j] = True
                warnings.warn(f"LCV fold {j + 1} for ranks {rs} did not converge", RuntimeWarning,
                              stacklevel=2)
            scores[i, j] = -log_likelihood(rep.params, dtest, orthogonal=orth)
    return LcvResult(candidates, scores, flags)
