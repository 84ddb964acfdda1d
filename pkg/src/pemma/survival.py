"""Discrete-time survival: quantile binning, DeepHit loss and Antolini's C-index."""

from __future__ import annotations

import warnings

import numpy as np

from pemma import autodiff as ad
from pemma.autodiff import Tensor
from pemma.exceptions import DataError, ShapeError

N_BINS = 20
ETA = 0.1
SIGMA = 0.1
SURVIVAL_FLOOR = 1e-12


def discretize_times(times, n_bins: int = N_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Quantile edges (n_bins + 1,) and the bin of every record.

    A record falls in the bin whose upper edge is the first edge >= its time,
    so a time equal to an interior edge goes to the lower bin.
    """
    t = np.asarray(times, dtype=np.float64).ravel()
    if t.size == 0:
        raise DataError("no survival times")
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise DataError("survival times must be finite and nonnegative")
    if np.all(t == t[0]):
        raise DataError("all survival times are identical; cannot form bins")
    edges = np.quantile(t, np.linspace(0.0, 1.0, n_bins + 1))
    return edges, assign_bins(t, edges)


def assign_bins(times, edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    return np.searchsorted(edges[1:-1], t, side="left").astype(np.int64)


def _records(times, events, bins, n: int):
    times = np.asarray(times, dtype=np.float64).ravel()
    events = np.asarray(events).astype(bool).ravel()
    bins = np.asarray(bins, dtype=np.int64).ravel()
    if not (times.size == events.size == bins.size == n):
        raise ShapeError(f"expected {n} records, got times {times.size}, events {events.size}, bins {bins.size}")
    return times, events, bins


def comparable_pairs(times, events) -> np.ndarray:
    """Boolean (n, n) matrix: i had the event and t_i < t_j."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events).astype(bool)
    return events[:, None] & (times[:, None] < times[None, :])


def deephit_loss(pmf: Tensor, times, events, bins, eta: float = ETA, sigma: float = SIGMA) -> Tensor:
    """Negative log-likelihood plus ``eta`` times the exponential ranking penalty.

    ``pmf`` is (n, K) with rows summing to one.
    """
    n, k = pmf.shape
    times, events, bins = _records(times, events, bins, n)
    if bins.min() < 0 or bins.max() >= k:
        raise DataError(f"bin index out of range [0, {k})")
    dt = pmf.dtype
    onehot = np.eye(k, dtype=dt)[bins]
    after = (np.arange(k)[None, :] > bins[:, None]).astype(dt)

    p_event = ad.sum(pmf * onehot, axis=1)
    p_beyond = ad.sum(pmf * after, axis=1)
    ev = events.astype(dt)
    # censored in the last bin: nothing is known beyond the horizon, likelihood 1
    horizon = (~events & (bins == k - 1)).astype(dt)
    lik = p_event * ev + p_beyond * (1.0 - ev - horizon) + horizon
    small = (lik.data < SURVIVAL_FLOOR) & ~events
    if small.any():
        warnings.warn(f"clamped zero survival mass for {int(small.sum())} censored subject(s)", RuntimeWarning,
                      stacklevel=2)
    nll = -ad.mean(ad.log(ad.clip(lik, SURVIVAL_FLOOR, None)))

    comp = comparable_pairs(times, events).astype(dt)
    n_pairs = comp.sum()
    if n_pairs == 0 or eta == 0:
        return nll
    cif = ad.cumsum(pmf, axis=1)
    # f_at[a, i] = F_a(t_i)
    f_at = ad.matmul(cif, onehot.T)
    own = ad.sum(f_at * np.eye(n, dtype=dt), axis=0)
    diff = ad.reshape(own, (n, 1)) - ad.transpose(f_at, (1, 0))
    rank = ad.sum(ad.exp(diff * (-1.0 / sigma)) * comp) / float(n_pairs)
    return nll + rank * eta


def survival_curves(pmf) -> np.ndarray:
    """S(k) = 1 - sum_{j <= k} pmf[j]."""
    return 1.0 - np.cumsum(np.asarray(pmf, dtype=np.float64), axis=-1)


def antolini_cindex(pred, times, events, bins, kind: str = "pmf", return_pairs: bool = False):
    """Time-dependent concordance over comparable pairs; prediction ties count one half.

    ``pred`` is (n, K): a probability mass per bin (``kind="pmf"``) or a
    survival curve (``kind="survival"``).  The pair (i, j) is concordant
    when S_i(t_i) < S_j(t_i), evaluated at column ``bins[i]``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2:
        raise ShapeError("predictions must be (n, bins)")
    n = pred.shape[0]
    if n < 2:
        raise DataError("C-index needs at least two records")
    times, events, bins = _records(times, events, bins, n)
    if kind == "pmf":
        surv = survival_curves(pred)
    elif kind == "survival":
        surv = pred
    else:
        raise ValueError(f"unknown prediction kind {kind!r}")
    comp = comparable_pairs(times, events)
    n_pairs = int(comp.sum())
    if n_pairs == 0:
        raise DataError("no comparable pairs")
    # s_at[i, j] = S_j(t_i)
    s_at = surv[:, bins].T
    own = s_at[np.arange(n), np.arange(n)][:, None]
    concordant = int((comp & (own < s_at)).sum())
    ties = int((comp & (own == s_at)).sum())
    c = (concordant + 0.5 * ties) / n_pairs
    return (c, n_pairs) if return_pairs else c
