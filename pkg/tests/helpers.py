"""Independent oracles shared across the test modules.

Everything here is written from definitions (O(n^2) ranks, explicit sums,
central differences) so it cannot share a bug with the library code it
checks.
"""

import math

import numpy as np

from shapenas import tensor as T


def central_difference_grads(loss_fn, tensors, h=1e-5, max_entries=None,
                             rng=None):
    """d(loss)/d(entry) by central differences for each listed tensor.

    Returns {tensor index: {multi_index: derivative}}. ``max_entries``
    subsamples positions (seeded) for large tensors.
    """
    out = {}
    for ti, t in enumerate(tensors):
        arr = t.data
        indices = list(np.ndindex(arr.shape))
        if max_entries is not None and len(indices) > max_entries:
            pick = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in pick]
        grads = {}
        for idx in indices:
            old = arr[idx]
            arr[idx] = old + h
            fp = loss_fn()
            arr[idx] = old - h
            fm = loss_fn()
            arr[idx] = old
            grads[idx] = (fp - fm) / (2.0 * h)
        out[ti] = grads
    return out


def relative_error(a, b, floor=1e-5):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_tape_gradients(build_loss, tensors, h=1e-5, tol=1e-4,
                         max_entries=None, seed=0):
    """Run backward once and compare every sampled entry against central
    differences; returns the worst relative error seen."""
    with T.Tape() as tape:
        loss = build_loss()
    T.backward(tape, loss, leaves=tensors)
    analytic = [t.grad.copy() for t in tensors]
    for t in tensors:
        t.grad = None

    def loss_value():
        return float(build_loss().data)

    rng = np.random.default_rng(seed)
    fd = central_difference_grads(
        loss_value, tensors, h=h, max_entries=max_entries, rng=rng
    )
    worst = 0.0
    for ti, grads in fd.items():
        for idx, d in grads.items():
            worst = max(worst, relative_error(analytic[ti][idx], d))
    assert worst <= tol, f"gradient mismatch: worst relative error {worst}"
    return worst


def rank_by_definition(values):
    """Average ranks computed entry by entry from the definition."""
    values = list(values)
    ranks = []
    for x in values:
        below = sum(1 for y in values if y < x)
        ties = sum(1 for y in values if y == x)
        ranks.append(below + (ties + 1) / 2.0)
    return ranks


def pearson_by_definition(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def spearman_by_definition(a, b):
    return pearson_by_definition(rank_by_definition(a), rank_by_definition(b))


def r2_by_definition(y_true, y_pred):
    m = sum(y_true) / len(y_true)
    ss_res = sum((t - p) ** 2 for t, p in zip(y_true, y_pred))
    ss_tot = sum((t - m) ** 2 for t in y_true)
    return 1.0 - ss_res / ss_tot
