"""Two-layer split classifier: shared ReLU feature layer + personalized
softmax head, with analytic gradients of the class-weighted risk.

The shared block is what federated aggregation averages; the head stays
local.  All operations are pure: they never mutate their inputs.
"""

from dataclasses import dataclass

import numpy as np

from driftfl import kernels
from driftfl.errors import CoverageError
from driftfl.kernels import PROB_FLOOR

JOINT = "joint"
HEAD_ONLY = "head_only"


@dataclass
class SplitParams:
    """Model parameters partitioned into shared and personalized blocks."""

    shared_W: np.ndarray  # (hidden_dim, input_dim)
    shared_b: np.ndarray  # (hidden_dim,)
    head_W: np.ndarray    # (num_classes, hidden_dim)
    head_b: np.ndarray    # (num_classes,)

    def __post_init__(self):
        self.shared_W = np.ascontiguousarray(self.shared_W, dtype=np.float64)
        self.shared_b = np.ascontiguousarray(self.shared_b, dtype=np.float64)
        self.head_W = np.ascontiguousarray(self.head_W, dtype=np.float64)
        self.head_b = np.ascontiguousarray(self.head_b, dtype=np.float64)
        h, d = self.shared_W.shape
        k, h2 = self.head_W.shape
        if h < 1 or h2 != h or self.shared_b.shape != (h,) or self.head_b.shape != (k,):
            raise ValueError("inconsistent parameter dimensions")

    def validate(self) -> "SplitParams":
        """Full finiteness check; construction sites that ingest external
        data call this, the SGD loop keeps entries finite by construction
        (softmax is overflow-safe and CE gradients are bounded)."""
        for a in (self.shared_W, self.shared_b, self.head_W, self.head_b):
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite parameter entries")
        return self

    @property
    def input_dim(self) -> int:
        return self.shared_W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.shared_W.shape[0]

    @property
    def num_classes(self) -> int:
        return self.head_W.shape[0]

    def copy(self) -> "SplitParams":
        return SplitParams(self.shared_W.copy(), self.shared_b.copy(),
                           self.head_W.copy(), self.head_b.copy())

    def to_dict(self) -> dict:
        return {
            "shared_W": self.shared_W.tolist(),
            "shared_b": self.shared_b.tolist(),
            "head_W": self.head_W.tolist(),
            "head_b": self.head_b.tolist(),
            "dims": {"input_dim": self.input_dim,
                     "hidden_dim": self.hidden_dim,
                     "num_classes": self.num_classes},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitParams":
        params = cls(np.array(d["shared_W"]), np.array(d["shared_b"]),
                     np.array(d["head_W"]), np.array(d["head_b"]))
        dims = d.get("dims")
        if dims and (dims["input_dim"] != params.input_dim
                     or dims["hidden_dim"] != params.hidden_dim
                     or dims["num_classes"] != params.num_classes):
            raise ValueError("dims field disagrees with array shapes")
        return params.validate()


@dataclass
class SplitGrads:
    """Gradient blocks, same shapes as SplitParams."""

    shared_W: np.ndarray
    shared_b: np.ndarray
    head_W: np.ndarray
    head_b: np.ndarray


@dataclass
class LabeledBatch:
    features: np.ndarray  # (n, input_dim)
    labels: np.ndarray    # (n,) class indices

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a nonempty (n, d) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("label count must match sample count")
        if self.labels.min() < 0:
            raise ValueError("labels must be nonnegative class indices")

    def __len__(self) -> int:
        return self.features.shape[0]

    def unlabeled(self) -> "UnlabeledBatch":
        return UnlabeledBatch(self.features)


@dataclass
class UnlabeledBatch:
    features: np.ndarray  # (n, input_dim)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("features must be a nonempty (n, d) matrix")

    def __len__(self) -> int:
        return self.features.shape[0]


def init_params(rng: np.random.Generator, input_dim: int, hidden_dim: int,
                num_classes: int) -> SplitParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    s1 = 1.0 / np.sqrt(input_dim)
    s2 = 1.0 / np.sqrt(hidden_dim)
    return SplitParams(
        shared_W=rng.uniform(-s1, s1, size=(hidden_dim, input_dim)),
        shared_b=np.zeros(hidden_dim),
        head_W=rng.uniform(-s2, s2, size=(num_classes, hidden_dim)),
        head_b=np.zeros(num_classes),
    )


def forward_batch(params: SplitParams, features: np.ndarray):
    """(hiddens, probs) for a feature matrix, via the active kernel backend."""
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ValueError(f"feature dimension {X.shape} does not match "
                         f"input_dim {params.input_dim}")
    return kernels.forward_batch(params.shared_W, params.shared_b,
                                 params.head_W, params.head_b, X)


def forward(params: SplitParams, x):
    """Single-sample forward pass: (hidden vector, class probabilities)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single feature vector")
    H, P = forward_batch(params, x[None, :])
    return H[0], P[0]


def per_sample_coefficients(labels: np.ndarray, weights: np.ndarray,
                            num_classes: int) -> np.ndarray:
    """coef[n] = weights[y_n] / count(y_n); requires every class present."""
    counts = np.bincount(labels, minlength=num_classes)
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise CoverageError(
            f"anchor is missing class(es) {missing.tolist()}",
            missing_classes=missing.tolist())
    return weights[labels] / counts[labels]


def class_wise_risks(params: SplitParams, anchor: LabeledBatch) -> np.ndarray:
    """Per-class mean cross-entropy over the anchor samples of that class."""
    if anchor.labels.max() >= params.num_classes:
        raise ValueError("anchor labels exceed the model's class count")
    counts = np.bincount(anchor.labels, minlength=params.num_classes)
    missing = np.nonzero(counts == 0)[0]
    if missing.size:
        raise CoverageError(
            f"anchor is missing class(es) {missing.tolist()}",
            missing_classes=missing.tolist())
    _, P = forward_batch(params, anchor.features)
    ce = -np.log(np.maximum(P[np.arange(len(anchor)), anchor.labels], PROB_FLOOR))
    sums = np.zeros(params.num_classes)
    np.add.at(sums, anchor.labels, ce)
    return sums / counts


def weighted_risk(params: SplitParams, anchor: LabeledBatch, weights) -> float:
    """Class-weighted risk: dot(weights, class_wise_risks)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size != params.num_classes:
        raise ValueError("weights length must equal the class count")
    coef = per_sample_coefficients(anchor.labels, w, params.num_classes)
    loss, *_ = kernels.risk_grads(params.shared_W, params.shared_b,
                                  params.head_W, params.head_b,
                                  anchor.features, anchor.labels, coef, True)
    return float(loss)


def grad_weighted_risk(params: SplitParams, anchor: LabeledBatch, weights,
                       which: str = JOINT) -> SplitGrads:
    """Analytic gradient of ``weighted_risk``; head_only zeroes shared blocks."""
    if which not in (JOINT, HEAD_ONLY):
        raise ValueError(f"unknown gradient mode {which!r}")
    w = np.asarray(weights, dtype=np.float64)
    if w.size != params.num_classes:
        raise ValueError("weights length must equal the class count")
    coef = per_sample_coefficients(anchor.labels, w, params.num_classes)
    _, gW1, gb1, gW2, gb2 = kernels.risk_grads(
        params.shared_W, params.shared_b, params.head_W, params.head_b,
        anchor.features, anchor.labels, coef, which == HEAD_ONLY)
    return SplitGrads(gW1, gb1, gW2, gb2)


def sgd_step(params: SplitParams, grads: SplitGrads, eta: float,
             which: str = JOINT) -> SplitParams:
    """params - eta * grads on the selected blocks; other blocks unchanged."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if which not in (JOINT, HEAD_ONLY):
        raise ValueError(f"unknown update mode {which!r}")
    if which == JOINT:
        shared_W = params.shared_W - eta * grads.shared_W
        shared_b = params.shared_b - eta * grads.shared_b
    else:
        shared_W = params.shared_W.copy()
        shared_b = params.shared_b.copy()
    return SplitParams(shared_W, shared_b,
                       params.head_W - eta * grads.head_W,
                       params.head_b - eta * grads.head_b)


def predictions(params: SplitParams, features: np.ndarray) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest index."""
    _, P = forward_batch(params, features)
    return np.argmax(P, axis=1)


def accuracy(params: SplitParams, batch: LabeledBatch) -> float:
    return float(np.mean(predictions(params, batch.features) == batch.labels))


def mean_cross_entropy(params: SplitParams, batch: LabeledBatch) -> float:
    """Plain mean CE over a labeled batch (evaluation loss)."""
    _, P = forward_batch(params, batch.features)
    p_true = P[np.arange(len(batch)), batch.labels]
    return float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))
