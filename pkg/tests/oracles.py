"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (explicit loops, central
finite differences) and stays independent of the package's computation
paths.
"""

import math

import numpy as np


def softmax_direct(logits):
    """Direct e^x / sum e^x, no max-subtraction trick."""
    e = [math.exp(v) for v in logits]
    s = sum(e)
    return np.array([v / s for v in e])


def forward_scalar(shared_W, shared_b, head_W, head_b, x):
    """Scalar-by-scalar two-layer forward pass."""
    h = []
    for j in range(len(shared_b)):
        acc = shared_b[j]
        for m in range(len(x)):
            acc += shared_W[j][m] * x[m]
        h.append(max(acc, 0.0))
    logits = []
    for i in range(len(head_b)):
        acc = head_b[i]
        for j in range(len(h)):
            acc += head_W[i][j] * h[j]
        logits.append(acc)
    return np.array(h), softmax_direct(logits)


def per_class_ce(probs, labels, num_classes):
    """Brute-force per-class mean cross-entropy."""
    sums = [0.0] * num_classes
    counts = [0] * num_classes
    for p_row, y in zip(probs, labels):
        sums[y] += -math.log(max(p_row[y], 1e-12))
        counts[y] += 1
    return np.array([s / c for s, c in zip(sums, counts)])


def weighted_risk_direct(params_eval, features, labels, weights, num_classes):
    """Evaluate the class-weighted risk through a supplied forward function."""
    probs = [params_eval(x)[1] for x in features]
    risks = per_class_ce(probs, labels, num_classes)
    return float(sum(w * r for w, r in zip(weights, risks)))


def confusion_tally(preds, labels, num_classes):
    """Per-sample tally of the column-stochastic confusion matrix."""
    m = np.zeros((num_classes, num_classes))
    counts = np.zeros(num_classes)
    for p, y in zip(preds, labels):
        m[p, y] += 1
        counts[y] += 1
    return m / counts


def finite_diff_grads(loss_fn, params, step=1e-5):
    """Central finite differences of a scalar loss over a SplitParams value.

    Returns arrays shaped like (shared_W, shared_b, head_W, head_b).
    """
    grads = []
    for name in ("shared_W", "shared_b", "head_W", "head_b"):
        base = getattr(params, name)
        g = np.zeros_like(base)
        flat = base.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn(params)
            flat[i] = orig - step
            lo = loss_fn(params)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return tuple(grads)


def max_rel_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(floor, |a|, |n|) over matching blocks."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def simplex_project_exhaustive(v):
    """Projection by trying every support size (quadratic, obviously correct)."""
    v = np.asarray(v, dtype=np.float64)
    best, best_dist = None, math.inf
    n = v.size
    order = np.argsort(v)[::-1]
    for k in range(1, n + 1):
        support = order[:k]
        tau = (v[support].sum() - 1.0) / k
        x = np.maximum(v - tau, 0.0)
        if abs(x.sum() - 1.0) > 1e-9 or np.any(x < -1e-12):
            continue
        dist = float(((x - v) ** 2).sum())
        if dist < best_dist:
            best, best_dist = x, dist
    return best
