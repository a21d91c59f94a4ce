import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import planted_rank_views, random_params, sample
from sifa.core import FitOptions, MultiViewDataset, RankSet
from sifa.ranks import (
    LcvResult,
    RankCandidates,
    crude_ranks,
    estimate_signal_rank,
    fold_partition,
    lcv,
    neighbor_ranks,
    select_best,
    two_step_ranks,
)


def test_two_step_worked_example():
    assert two_step_ranks(76, [50, 31, 46]) == RankSet(26, (24, 5, 20))


@settings(max_examples=100, deadline=None)
@given(r0=st.integers(0, 10), r=st.lists(st.integers(0, 10), min_size=2, max_size=4))
def test_two_step_inverts_consistent_ranks(r0, r):
    # If per-view ranks are r0 + r_k and the stacked rank is r0 + sum(r_k),
    # the equations are solved exactly.
    star = [r0 + x for x in r]
    assert two_step_ranks(r0 + sum(r), star) == RankSet(r0, tuple(r))


def test_two_step_rounding_and_clamping():
    assert two_step_ranks(10, [6, 6, 5]).r0 == 4  # (17 - 10) / 2 = 3.5 rounds up
    assert two_step_ranks(20, [5, 5]) == RankSet(0, (5, 5))  # negative r0 clamps
    assert two_step_ranks(2, [5, 1]) == RankSet(4, (1, 0))
    with pytest.raises(ValueError):
        two_step_ranks(3, [3])


def test_estimate_signal_rank(rng):
    U = rng.standard_normal((100, 3)) * [10, 5, 2]
    Y = U @ np.linalg.qr(rng.standard_normal((20, 3)))[0].T
    d2 = np.linalg.svd(Y - Y.mean(axis=0), compute_uv=False) ** 2
    frac = np.cumsum(d2) / d2.sum()
    for t in (0.5, 0.9, 0.99, 0.999999):
        assert estimate_signal_rank(Y, t) == int(np.argmax(frac >= t) + 1)
    assert estimate_signal_rank(np.zeros((5, 4))) == 0
    assert estimate_signal_rank(np.ones((5, 4))) == 0  # constant columns center to zero
    with pytest.raises(ValueError):
        estimate_signal_rank(Y, 1.0)


def test_crude_ranks_on_clean_data(rng):
    params = random_params(rng, [20, 20], RankSet(1, (2, 1)), scale=100.0)
    params = params.replace(noise_var=np.array([1e-6, 1e-6]))
    data, _ = sample(rng, params, 200)
    assert crude_ranks(data, 0.999) == RankSet(1, (2, 1))


def test_neighbor_ranks():
    out = neighbor_ranks(RankSet(2, (3, 3)))
    assert out[0] == RankSet(2, (3, 3)) and len(out) == 27 and len(set(out)) == 27
    assert len(neighbor_ranks(RankSet(0, (0, 1)))) == 2 * 2 * 3
    assert all(not rs.violations([4, 4], 10) for rs in neighbor_ranks(RankSet(1, (2, 2)), [4, 4], 10))


def test_select_best_ties():
    sets = [RankSet(2, (3, 3)), RankSet(1, (3, 3)), RankSet(1, (2, 3))]
    assert select_best([5.0, 4.0, 6.0], sets) == 1
    assert select_best([5.0, 5.0, 5.0 * (1 + 1e-12)], sets) == 2  # smallest total wins a near tie
    assert select_best([1.0, 1.0, 2.0], sets) == 1


def test_fold_partition():
    parts = fold_partition(23, 5, seed=3)
    assert sorted(np.concatenate(parts).tolist()) == list(range(23))
    assert {len(p) for p in parts} <= {4, 5}
    again = fold_partition(23, 5, seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def test_candidates_validation():
    with pytest.raises(ValueError):
        RankCandidates(())
    with pytest.raises(ValueError):
        RankCandidates((RankSet(1, (1, 1)),), folds=1)
    with pytest.raises(ValueError):
        RankCandidates((RankSet(1, (1, 1)), RankSet(1, (1,))))


def test_lcv_result_margins():
    c = RankCandidates((RankSet(1, (1, 1)), RankSet(2, (1, 1))), folds=2)
    res = LcvResult(c, np.array([[3.0, 5.0], [1.0, 2.0]]), np.zeros((2, 2), bool))
    assert res.best == 1 and res.best_ranks == RankSet(2, (1, 1))
    np.testing.assert_allclose(res.margins(), [2.5, 0.0])


def test_lcv_selects_true_rank_on_strong_signal(rng):
    params = random_params(rng, [12, 12], RankSet(1, (1, 1)), q=2, scale=30.0)
    data, _ = sample(rng, params, 120, q=2, center=True)
    cands = RankCandidates((RankSet(0, (1, 1)), RankSet(1, (1, 1)), RankSet(1, (2, 2))), folds=4)
    res = lcv(data, cands, FitOptions(max_iters=100, seed=2))
    assert res.scores.shape == (3, 4) and res.flags.shape == (3, 4)
    assert res.best_ranks == RankSet(1, (1, 1))
    again = lcv(data, cands, FitOptions(max_iters=100, seed=2))
    np.testing.assert_array_equal(res.scores, again.scores)


def test_lcv_flags_nonconvergence(rng):
    params = random_params(rng, [6, 6], RankSet(1, (1, 1)))
    data, _ = sample(rng, params, 40, center=True)
    cands = RankCandidates((RankSet(1, (1, 1)),), folds=2)
    with pytest.warns(RuntimeWarning):
        res = lcv(data, cands, FitOptions(max_iters=1, tol=1e-15))
    assert res.flags.all()


def test_lcv_input_checks(rng):
    params = random_params(rng, [6, 6], RankSet(1, (1, 1)))
    data, _ = sample(rng, params, 10, center=True)
    with pytest.raises(ValueError):
        lcv(data, RankCandidates((RankSet(1, (1, 1)),), folds=6))
    with pytest.raises(ValueError):
        lcv(data, RankCandidates((RankSet(1, (1, 1)), RankSet(1, (1,))), folds=2))


def test_threshold_pipeline_on_planted_gtex_shape():
    views = planted_rank_views()
    assert [estimate_signal_rank(Y) for Y in views] == [50, 31, 46]
    assert estimate_signal_rank(np.hstack(views)) == 76
    data = MultiViewDataset.from_arrays(views)
    assert crude_ranks(data, 0.9) == RankSet(26, (24, 5, 20))
