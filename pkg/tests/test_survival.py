import math

import numpy as np
import pytest

from pemma.autodiff import Tensor, finite_difference_check
from pemma import autodiff as ad
from pemma.exceptions import DataError
from pemma.survival import antolini_cindex, assign_bins, deephit_loss, discretize_times, survival_curves
from oracles import cindex_bruteforce, deephit_loop, survival_from_pmf


def _pmf(rng, n, k=20):
    x = rng.random((n, k)) + 1e-3
    return x / x.sum(1, keepdims=True)


def test_uniform_times_one_per_bin():
    _, bins = discretize_times(np.arange(1, 21), 20)
    assert np.bincount(bins, minlength=20).tolist() == [1] * 20


def test_ties_fall_in_first_bin():
    edges, bins = discretize_times([1, 1, 1, 9], 2)
    assert bins.tolist() == [0, 0, 0, 1]
    assert edges[0] == 1 and edges[-1] == 9


def test_degenerate_times_rejected():
    with pytest.raises(DataError):
        discretize_times([3, 3, 3], 4)


@pytest.mark.parametrize("seed", range(5))
def test_cohort_of_488_balanced(seed):
    times = np.random.default_rng(seed).exponential(30.0, size=488)
    _, bins = discretize_times(times, 20)
    counts = np.bincount(bins, minlength=20)
    assert set(counts.tolist()) <= {24, 25} and counts.sum() == 488


def test_assign_bins_uses_training_edges():
    edges, _ = discretize_times(np.arange(1.0, 11.0), 2)
    assert assign_bins([0.0, 100.0], edges).tolist() == [0, 1]


def test_survival_curve_matches_loop():
    pmf = _pmf(np.random.default_rng(0), 4)
    np.testing.assert_array_equal(survival_curves(pmf), survival_from_pmf(pmf))


def test_cindex_seed11_matches_bruteforce():
    rng = np.random.default_rng(11)
    times = rng.exponential(10.0, 20)
    events = rng.random(20) < 0.5
    edges, bins = discretize_times(times, 5)
    pmf = _pmf(rng, 20, 5)
    assert antolini_cindex(pmf, times, events, bins) == cindex_bruteforce(survival_from_pmf(pmf), times, events,
                                                                          bins)


def test_cindex_extremes():
    times = np.arange(1.0, 7.0)
    events = np.ones(6, bool)
    _, bins = discretize_times(times, 6)
    # flat survival levels: later events get higher survival
    surv = np.tile(np.linspace(0.1, 0.6, 6)[:, None], (1, 6))
    assert antolini_cindex(surv, times, events, bins, kind="survival") == 1.0
    assert antolini_cindex(surv[::-1], times, events, bins, kind="survival") == 0.0
    assert antolini_cindex(np.eye(6), times, events, bins) == 1.0


def test_cindex_invariant_to_monotone_transform_of_survival():
    rng = np.random.default_rng(4)
    times = rng.exponential(5.0, 15)
    events = rng.random(15) < 0.6
    _, bins = discretize_times(times, 4)
    surv = survival_from_pmf(_pmf(rng, 15, 4))
    a = antolini_cindex(surv, times, events, bins, kind="survival")
    assert antolini_cindex(surv**3, times, events, bins, kind="survival") == a


def test_cindex_needs_comparable_pairs():
    with pytest.raises(DataError):
        antolini_cindex(np.full((2, 2), 0.5), [1.0, 2.0], [False, False], [0, 1])


@pytest.mark.parametrize("seed", range(10))
def test_deephit_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n, k = 8, 5
    times = rng.exponential(5.0, n)
    events = rng.random(n) < 0.5
    _, bins = discretize_times(times, k)
    pmf = _pmf(rng, n, k)
    got = float(deephit_loss(Tensor(pmf), times, events, bins, 0.1, 0.1).data)
    assert got == pytest.approx(deephit_loop(pmf, times, events, bins, 0.1, 0.1), rel=1e-12)


def test_deephit_single_event_concentrated():
    pmf = np.full((1, 4), 1e-9)
    pmf[0, 2] = 1 - 3e-9
    assert float(deephit_loss(Tensor(pmf), [3.0], [True], [2]).data) < 1e-8


def test_ranking_term_perfect_order():
    # F_i(t_i) = 1 and F_j(t_i) = 0 for the single comparable pair
    pmf = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = deephit_loss(Tensor(pmf), [1.0, 2.0], [True, True], [0, 1], eta=1.0, sigma=0.1)
    nll = deephit_loss(Tensor(pmf), [1.0, 2.0], [True, True], [0, 1], eta=0.0)
    assert float(loss.data - nll.data) == pytest.approx(math.exp(-1 / 0.1), rel=1e-12)
    swapped = deephit_loss(Tensor(pmf[::-1].copy()), [1.0, 2.0], [True, True], [0, 1], eta=1.0, sigma=0.1)
    assert float(swapped.data) > float(loss.data)


@pytest.mark.parametrize("seed", range(20))
def test_deephit_gradcheck(seed):
    rng = np.random.default_rng(seed)
    n, k = 6, 4
    times = rng.exponential(5.0, n)
    events = rng.random(n) < 0.6
    _, bins = discretize_times(times, k)
    x = Tensor(rng.normal(size=(n, k)))
    f = lambda t: deephit_loss(ad.softmax(t, axis=-1), times, events, bins)  # noqa: E731
    assert finite_difference_check(f, x) < 1e-4
