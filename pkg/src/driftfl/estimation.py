"""Label-shift estimation and distribution-dynamics signals.

The server builds a confusion matrix from held-out pretraining data once;
clients invert it (ridge-regularized, then simplex-projected) against their
hard prediction histograms to recover the current class prior without
labels.  Drift is sensed by cosine distance between consecutive batch
summaries (mean softmax vector; mean of unit-normalized hidden features) and
mapped affinely onto a bounded learning rate.
"""

import logging
from dataclasses import dataclass

import numpy as np

from driftfl import model as mdl
from driftfl.errors import CoverageError
from driftfl.numerics import (check_prob_vector, cosine, simplex_project,
                              solve_regularized)

log = logging.getLogger(__name__)

DEFAULT_RIDGE = 1e-6
# pre-projection entries this far below zero indicate a near-singular matrix
CONDITIONING_ALERT = -0.5


@dataclass
class ConfusionMatrix:
    """Column-stochastic confusion matrix: m[i, j] = P(predict i | class j)."""

    m: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.float64)
        k = self.m.shape[0]
        if self.m.ndim != 2 or self.m.shape != (k, k):
            raise ValueError("confusion matrix must be square")
        if np.any(self.m < 0):
            raise ValueError("confusion matrix entries must be nonnegative")
        col_sums = self.m.sum(axis=0)
        if np.any(np.abs(col_sums - 1.0) > 1e-9):
            raise ValueError("confusion matrix columns must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.m.shape[0]


@dataclass
class BatchSummary:
    """Cached per-batch statistics driving the drift signals."""

    mean_probs: np.ndarray    # mean softmax output, a probability vector
    mean_feature: np.ndarray  # mean of l2-normalized hidden activations

    def __post_init__(self):
        self.mean_probs = check_prob_vector(self.mean_probs)
        self.mean_feature = np.asarray(self.mean_feature, dtype=np.float64)


@dataclass
class RateBounds:
    eta_min: float
    eta_max: float

    def __post_init__(self):
        if not 0 < self.eta_min <= self.eta_max:
            raise ValueError(f"need 0 < eta_min <= eta_max, "
                             f"got ({self.eta_min}, {self.eta_max})")


def build_confusion(params: mdl.SplitParams, data: mdl.LabeledBatch) -> ConfusionMatrix:
    """Column-normalized tally of (predicted, true) pairs over labeled data."""
    k = params.num_classes
    if data.labels.max() >= k:
        raise ValueError("labels exceed the model's class count")
    counts = np.bincount(data.labels, minlength=k)
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise CoverageError(f"confusion data is missing class(es) {missing.tolist()}",
                            missing_classes=missing.tolist())
    preds = mdl.predictions(params, data.features)
    m = np.zeros((k, k))
    np.add.at(m, (preds, data.labels), 1.0)
    return ConfusionMatrix(m / counts, sample_count=len(data))


def prediction_histogram(params: mdl.SplitParams, batch: mdl.UnlabeledBatch) -> np.ndarray:
    """Normalized histogram of hard argmax predictions."""
    preds = mdl.predictions(params, batch.features)
    return np.bincount(preds, minlength=params.num_classes) / len(batch)


def bbse_estimate(conf: ConfusionMatrix, q_hat, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Estimated class prior: ridge-regularized solve of m x = q_hat,
    projected back onto the simplex."""
    q_hat = check_prob_vector(q_hat)
    if q_hat.size != conf.num_classes:
        raise ValueError("histogram length must match the confusion matrix")
    raw = solve_regularized(conf.m, q_hat, ridge)
    if raw.min() < CONDITIONING_ALERT:
        # first occurrence per process warns, the rest go to debug
        level = logging.DEBUG if _conditioning_alerted() else logging.WARNING
        log.log(level, "shift estimate far outside the simplex (min %.3f); "
                "confusion matrix may be near-singular", raw.min())
    return simplex_project(raw)


_CONDITIONING_SEEN = []


def _conditioning_alerted() -> bool:
    if _CONDITIONING_SEEN:
        return True
    _CONDITIONING_SEEN.append(True)
    return False


def summarize_batch(H: np.ndarray, P: np.ndarray) -> BatchSummary:
    """Summary from precomputed forward outputs (shared with batch_summary)."""
    norms = np.linalg.norm(H, axis=1)
    unit = np.zeros_like(H)
    alive = norms >= 1e-12  # dead-ReLU rows contribute the zero vector
    unit[alive] = H[alive] / norms[alive, None]
    return BatchSummary(mean_probs=P.mean(axis=0), mean_feature=unit.mean(axis=0))


def batch_summary(params: mdl.SplitParams, batch: mdl.UnlabeledBatch) -> BatchSummary:
    H, P = mdl.forward_batch(params, batch.features)
    return summarize_batch(H, P)


def uncertainty_signal(prev_probs, cur_probs) -> float:
    """1 - cos between consecutive mean-softmax vectors; in [0, 1]."""
    return max(0.0, 1.0 - cosine(prev_probs, cur_probs))


def representation_signal(prev_feature, cur_feature) -> float:
    """(1 - cos)/2 between consecutive mean-feature vectors; in [0, 1]."""
    return max(0.0, 0.5 * (1.0 - cosine(prev_feature, cur_feature)))


def combine_signals(s_unc: float, s_rep: float) -> float:
    """Arithmetic mean of the two drift signals."""
    for name, s in (("s_unc", s_unc), ("s_rep", s_rep)):
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"{name}={s} outside [0, 1]")
    return 0.5 * (s_unc + s_rep)


def adaptive_rate(signal: float, bounds: RateBounds) -> float:
    """Affine map of the drift signal onto [eta_min, eta_max]."""
    if not 0.0 <= signal <= 1.0:
        raise ValueError(f"signal={signal} outside [0, 1]")
    return bounds.eta_min + (bounds.eta_max - bounds.eta_min) * signal


def reference_rate(T: int, cum_shift: float, scale: float = 1.0) -> float:
    """Diagnostic-only optimal-rate reference: scale * T^(-1/3) * cum_shift^(1/3)."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if cum_shift < 0:
        raise ValueError("cum_shift must be nonnegative")
    if scale <= 0:
        raise ValueError("scale must be positive")
    return scale * T ** (-1.0 / 3.0) * cum_shift ** (1.0 / 3.0)


# --- alternative drift measures (ablation plug-ins, not the supported path) ---

KL_FLOOR = 1e-8


def kl_divergence(p, q) -> float:
    """KL(p || q) with additive floor smoothing on both arguments."""
    p = check_prob_vector(p)
    q = check_prob_vector(q)
    ps = (p + KL_FLOOR) / (1.0 + p.size * KL_FLOOR)
    qs = (q + KL_FLOOR) / (1.0 + q.size * KL_FLOOR)
    return float(np.sum(ps * np.log(ps / qs)))


def wasserstein_1d(p, q) -> float:
    """1-d Wasserstein distance between class-index distributions."""
    p = check_prob_vector(p)
    q = check_prob_vector(q)
    if p.size != q.size:
        raise ValueError("length mismatch")
    return float(np.abs(np.cumsum(p - q)).sum())


def drift_measure(name: str):
    """Lookup for the batch-summary drift measure; cosine is the default."""
    measures = {
        "cosine": uncertainty_signal,
        "kl": lambda a, b: kl_divergence(b, a),
        "wasserstein": wasserstein_1d,
    }
    try:
        return measures[name]
    except KeyError:
        raise ValueError(f"unknown drift measure {name!r}") from None
