"""Pure-numpy implementation of the hot per-batch kernels.

Semantics here are the reference; the compiled extension must agree to
floating-point roundoff.  Conventions shared by both backends:

* hidden activation is ReLU with derivative 0 at exactly 0,
* softmax subtracts the row max before exponentiating,
* cross-entropy clamps probabilities at ``PROB_FLOOR`` and samples at the
  floor contribute zero gradient,
* argmax ties resolve to the lowest class index.
"""

import numpy as np

PROB_FLOOR = 1e-12

BACKEND = "numpy"


def forward_batch(W1, b1, W2, b2, X):
    """Hidden activations and softmax probabilities for a feature matrix.

    Args:
        W1, b1: shared layer, shapes (h, d) and (h,).
        W2, b2: head layer, shapes (k, h) and (k,).
        X: features, shape (n, d).

    Returns:
        (H, P) with H shape (n, h) and P shape (n, k); P rows sum to 1.
    """
    H = np.maximum(X @ W1.T + b1, 0.0)
    logits = H @ W2.T + b2
    logits = logits - logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    return H, P


def risk_grads(W1, b1, W2, b2, X, labels, coef, head_only):
    """Weighted cross-entropy loss and its parameter gradients.

    The objective is ``sum_n coef[n] * CE(softmax(model(X[n])), labels[n])``.
    With ``head_only`` the shared-layer gradients are exact zeros.

    Returns:
        (loss, gW1, gb1, gW2, gb2)
    """
    n = X.shape[0]
    H, P = forward_batch(W1, b1, W2, b2, X)
    p_true = P[np.arange(n), labels]
    clamped = p_true <= PROB_FLOOR
    loss = -float(np.dot(coef, np.log(np.maximum(p_true, PROB_FLOOR))))

    dlogits = P.copy()
    dlogits[np.arange(n), labels] -= 1.0
    live_coef = np.where(clamped, 0.0, coef)
    dlogits *= live_coef[:, None]

    gW2 = dlogits.T @ H
    gb2 = dlogits.sum(axis=0)
    if head_only:
        gW1 = np.zeros_like(W1)
        gb1 = np.zeros_like(b1)
    else:
        dH = (dlogits @ W2) * (H > 0.0)
        gW1 = dH.T @ X
        gb1 = dH.sum(axis=0)
    return loss, gW1, gb1, gW2, gb2
