"""Independent reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def cindex_bruteforce(surv, times, events, bins):
    """Double loop over all ordered pairs; S_i(t_i) < S_j(t_i) is concordant, equality counts 1/2."""
    num = 0.0
    den = 0
    n = len(times)
    for i in range(n):
        if not events[i]:
            continue
        for j in range(n):
            if i == j or not times[i] < times[j]:
                continue
            den += 1
            a, b = surv[i][bins[i]], surv[j][bins[i]]
            if a < b:
                num += 1.0
            elif a == b:
                num += 0.5
    return num / den


def survival_from_pmf(pmf):
    out = []
    for row in pmf:
        acc, s = 0.0, []
        for v in row:
            acc += v
            s.append(1.0 - acc)
        out.append(s)
    return np.array(out)


def deephit_loop(pmf, times, events, bins, eta, sigma):
    """Per-subject loops over the likelihood and ranking terms."""
    n, k = pmf.shape
    nll = 0.0
    for i in range(n):
        if events[i]:
            lik = pmf[i, bins[i]]
        elif bins[i] == k - 1:
            lik = 1.0
        else:
            lik = sum(pmf[i, bins[i] + 1:])
        nll -= math.log(max(lik, 1e-12))
    nll /= n
    cif = np.cumsum(pmf, axis=1)
    total, pairs = 0.0, 0
    for i, j in itertools.permutations(range(n), 2):
        if events[i] and times[i] < times[j]:
            pairs += 1
            total += math.exp(-(cif[i, bins[i]] - cif[j, bins[i]]) / sigma)
    return nll + (eta * total / pairs if pairs else 0.0)


def dense_lora(W, A, B, s, h):
    return (W + s * B @ A) @ h


def dense_dora(W, A, B, m, s, h):
    V = W + s * B @ A
    norms = np.array([math.sqrt(sum(x * x for x in row)) for row in V])
    return ((V.T * (m / norms)).T) @ h


def softmax_ref(x):
    e = [math.exp(v - max(x)) for v in x]
    t = sum(e)
    return [v / t for v in e]
