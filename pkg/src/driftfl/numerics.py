"""Dense vector/matrix primitives used throughout the simulator.

Vectors and matrices are plain float64 numpy arrays.  A "probability vector"
is a 1-d array with nonnegative entries summing to 1 within ``PROB_TOL``.
All functions are pure and safe to call concurrently.
"""

import numpy as np

from driftfl.errors import DegenerateInputError, IllConditionedError

PROB_TOL = 1e-9
ZERO_NORM_TOL = 1e-12


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def is_prob_vector(p, tol: float = PROB_TOL) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return (p.ndim == 1 and p.size > 0 and np.all(np.isfinite(p))
            and np.all(p >= 0.0) and abs(float(p.sum()) - 1.0) <= tol)


def check_prob_vector(p, tol: float = PROB_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if not is_prob_vector(p, tol):
        raise ValueError(f"not a probability vector (sum={p.sum()!r})")
    return p


def softmax(logits) -> np.ndarray:
    """Softmax with max-subtraction; argmax is preserved, output sums to 1."""
    z = as_vector(logits)
    if z.size == 0:
        raise ValueError("softmax of empty vector")
    e = np.exp(z - z.max())
    return e / e.sum()


def cosine(a, b) -> float:
    """Cosine similarity, clamped to [-1, 1] against rounding.

    Raises DegenerateInputError when either norm is below ``ZERO_NORM_TOL``.
    """
    a = as_vector(a)
    b = as_vector(b)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_TOL or nb < ZERO_NORM_TOL:
        raise DegenerateInputError("cosine of a zero-norm vector")
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def l1_distance(p, q) -> float:
    p = as_vector(p)
    q = as_vector(q)
    if p.size != q.size:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    return float(np.abs(p - q).sum())


def solve_regularized(M, v, ridge: float) -> np.ndarray:
    """Minimize ||M x - v||^2 + ridge ||x||^2 via the normal equations.

    With ridge = 0 and M well-conditioned this is exactly M^{-1} v.  A
    singular system with ridge = 0 raises IllConditionedError carrying an
    estimate of the smallest singular value.
    """
    M = np.asarray(M, dtype=np.float64)
    v = as_vector(v)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    if M.shape[0] != v.size:
        raise ValueError(f"dimension mismatch: {M.shape} vs {v.size}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    A = M.T @ M + ridge * np.eye(M.shape[0])
    rhs = M.T @ v
    if ridge == 0.0:
        smin = _smallest_singular_value(M)
        if smin < 1e-10 * max(1.0, float(np.abs(M).max())):
            raise IllConditionedError(
                f"singular system (smallest singular value {smin:.3e}) "
                "and ridge = 0", smallest_singular_value=smin)
    try:
        x = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        smin = _smallest_singular_value(M)
        raise IllConditionedError(str(exc), smallest_singular_value=smin) from exc
    return x


def _smallest_singular_value(M) -> float:
    return float(np.linalg.svd(M, compute_uv=False)[-1])


def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex.

    Sorted-threshold method: sort descending, find the largest support size
    whose shifted entries stay positive, subtract the threshold, clip at 0.
    Idempotent; returns the input (renormalized at roundoff level) when it is
    already a probability vector.
    """
    v = as_vector(v)
    if v.size == 0:
        raise ValueError("cannot project an empty vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    support = u - css / idx > 0
    rho = int(np.nonzero(support)[0][-1])
    tau = css[rho] / (rho + 1.0)
    return np.maximum(v - tau, 0.0)
