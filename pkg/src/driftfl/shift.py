"""Synthetic non-stationary data engine.

A client's class prior at step t is the convex combination
``(1 - w(t)) * Q0 + w(t) * QT`` driven by one of four schedules.  Features
are Gaussian blobs around per-class means; covariate drift is additive
feature noise whose severity follows the same schedules.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from driftfl.model import LabeledBatch
from driftfl.numerics import check_prob_vector

LINEAR = "linear"
SINE = "sine"
SQUARE = "square"
BERNOULLI = "bernoulli"
SCHEDULE_KINDS = (LINEAR, SINE, SQUARE, BERNOULLI)

LABEL_SHIFT = "label_shift"
COVARIATE_SHIFT = "covariate_shift"
SCENARIO_KINDS = (LABEL_SHIFT, COVARIATE_SHIFT)

SINE_CLAMP = "clamp"
SINE_RESCALE = "rescale"


@dataclass
class ShiftSchedule:
    """Weight trajectory w(t) in [0, 1] over t = 0..T.

    * linear: t / T
    * sine: sin(pi * t / sqrt(T)), clamped into [0, 1] (or rescaled to
      (1 + sin) / 2 with ``sine_mode="rescale"``)
    * square: alternates 0 and 1 in blocks of ceil(sqrt(T) / 2) steps
    * bernoulli: flips the previous value with probability 1 / sqrt(T)

    Only the bernoulli kind consumes the rng, and it requires t to advance
    one step per call; the other kinds are pure functions of t.
    """

    kind: str
    T: int
    sine_mode: str = SINE_CLAMP
    state: int = 0   # current value for the bernoulli kind
    _last_t: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.sine_mode not in (SINE_CLAMP, SINE_RESCALE):
            raise ValueError(f"unknown sine_mode {self.sine_mode!r}")

    def copy(self) -> "ShiftSchedule":
        return ShiftSchedule(self.kind, self.T, self.sine_mode,
                             self.state, self._last_t)


def omega(schedule: ShiftSchedule, t: int, rng: np.random.Generator | None = None) -> float:
    """Schedule weight at step t; always in [0, 1]."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [0, {schedule.T}]")
    T = schedule.T
    if schedule.kind == LINEAR:
        return t / T
    if schedule.kind == SINE:
        s = math.sin(math.pi * t / math.sqrt(T))
        if schedule.sine_mode == SINE_RESCALE:
            return 0.5 * (1.0 + s)
        return min(max(s, 0.0), 1.0)
    if schedule.kind == SQUARE:
        block = math.ceil(math.sqrt(T) / 2.0)
        return float((t // block) % 2)
    # bernoulli: stateful, one step per call
    if t == 0:
        schedule._last_t = 0
        return float(schedule.state)
    if t != schedule._last_t + 1:
        raise ValueError("bernoulli schedule must be advanced one step at a time")
    if rng is None:
        raise ValueError("bernoulli schedule requires an rng")
    if rng.random() < 1.0 / math.sqrt(T):
        schedule.state = 1 - schedule.state
    schedule._last_t = t
    return float(schedule.state)


def interpolate_prior(q0, qT, w: float) -> np.ndarray:
    """Convex combination (1 - w) * q0 + w * qT; endpoints return exactly."""
    q0 = check_prob_vector(q0)
    qT = check_prob_vector(qT)
    if q0.size != qT.size:
        raise ValueError("prior lengths differ")
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w={w} outside [0, 1]")
    if w == 0.0:
        return q0.copy()
    if w == 1.0:
        return qT.copy()
    return (1.0 - w) * q0 + w * qT


def sample_dirichlet_priors(alpha: float, num_clients: int, num_classes: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Per-client priors from a symmetric Dirichlet via normalized gammas.

    Small alpha yields highly skewed, non-IID priors.  Returns an array of
    shape (num_clients, num_classes).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if num_clients < 1 or num_classes < 1:
        raise ValueError("counts must be at least 1")
    g = rng.standard_gamma(alpha, size=(num_clients, num_classes))
    totals = g.sum(axis=1, keepdims=True)
    # gamma draws can underflow to 0 at very small alpha; redraw those rows
    while np.any(totals == 0.0):
        bad = np.nonzero(totals[:, 0] == 0.0)[0]
        g[bad] = rng.standard_gamma(alpha, size=(bad.size, num_classes))
        totals = g.sum(axis=1, keepdims=True)
    return g / totals


@dataclass
class SyntheticTask:
    """Gaussian-blob classification task: one mean per class, isotropic noise."""

    num_classes: int
    input_dim: int
    class_means: np.ndarray  # (num_classes, input_dim)
    noise_std: float
    mean_scale: float = 1.0

    def __post_init__(self):
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        if self.class_means.shape != (self.num_classes, self.input_dim):
            raise ValueError("class_means shape mismatch")
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")


def make_task(num_classes: int, input_dim: int, mean_scale: float,
              noise_std: float, rng: np.random.Generator) -> SyntheticTask:
    """Class means ~ mean_scale * N(0, I); separability grows with
    mean_scale / noise_std."""
    if num_classes < 1 or input_dim < 1 or noise_std <= 0:
        raise ValueError("num_classes, input_dim and noise_std must be positive")
    means = mean_scale * rng.standard_normal((num_classes, input_dim))
    return SyntheticTask(num_classes, input_dim, means, noise_std, mean_scale)


def sample_batch(task: SyntheticTask, prior, n: int,
                 rng: np.random.Generator) -> LabeledBatch:
    """n labeled samples: labels by inverse-CDF over the prior, features
    = class mean + noise_std * N(0, I)."""
    prior = check_prob_vector(prior)
    if prior.size != task.num_classes:
        raise ValueError("prior length must equal the task's class count")
    if n < 1:
        raise ValueError("n must be at least 1")
    cdf = np.cumsum(prior)
    u = rng.random(n)
    labels = np.minimum(np.searchsorted(cdf, u, side="right"),
                        task.num_classes - 1)
    features = task.class_means[labels] + task.noise_std * rng.standard_normal(
        (n, task.input_dim))
    return LabeledBatch(features, labels)


def corrupt(batch: LabeledBatch, severity: float,
            rng: np.random.Generator) -> LabeledBatch:
    """Additive isotropic feature noise scaled by severity; 0 is the identity."""
    if severity < 0:
        raise ValueError("severity must be nonnegative")
    if severity == 0.0:
        return LabeledBatch(batch.features.copy(), batch.labels.copy())
    noisy = batch.features + severity * rng.standard_normal(batch.features.shape)
    return LabeledBatch(noisy, batch.labels.copy())


UNIFORM = "uniform"
GAUSSIAN = "gaussian"
EXP_DECAY = "exp_decay"
PRETRAIN_PRIOR_KINDS = (UNIFORM, GAUSSIAN, EXP_DECAY)


def pretrain_prior(kind: str, num_classes: int) -> np.ndarray:
    """Class prior of the server's pre-collected data."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    i = np.arange(num_classes, dtype=np.float64)
    if kind == UNIFORM:
        raw = np.ones(num_classes)
    elif kind == GAUSSIAN:
        center = (num_classes - 1) / 2.0
        width = num_classes / 4.0
        raw = np.exp(-((i - center) ** 2) / (2.0 * width ** 2))
    elif kind == EXP_DECAY:
        raw = np.exp(-i / (num_classes / 4.0))
    else:
        raise ValueError(f"unknown pretrain prior kind {kind!r}")
    return raw / raw.sum()


@dataclass
class ClientShiftProfile:
    """A client's drift description: prior endpoints, schedule, scenario."""

    initial_prior: np.ndarray
    target_prior: np.ndarray
    schedule: ShiftSchedule
    scenario: str = LABEL_SHIFT
    corruption_max_severity: float = 0.0

    def __post_init__(self):
        self.initial_prior = check_prob_vector(self.initial_prior)
        self.target_prior = check_prob_vector(self.target_prior)
        if self.initial_prior.size != self.target_prior.size:
            raise ValueError("prior lengths differ")
        if self.scenario not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.corruption_max_severity < 0:
            raise ValueError("corruption severity must be nonnegative")
        if self.scenario == LABEL_SHIFT and self.corruption_max_severity != 0:
            raise ValueError("label-shift profiles must have zero corruption")
        if self.scenario == COVARIATE_SHIFT and not np.array_equal(
                self.initial_prior, self.target_prior):
            raise ValueError("covariate-shift profiles must keep the prior fixed")

    def prior_at(self, w: float) -> np.ndarray:
        if self.scenario == COVARIATE_SHIFT:
            return self.initial_prior.copy()
        return interpolate_prior(self.initial_prior, self.target_prior, w)

    def severity_at(self, w: float) -> float:
        if self.scenario == COVARIATE_SHIFT:
            return w * self.corruption_max_severity
        return 0.0


@dataclass
class ScenarioSpec:
    """Serializable description of a whole synthetic scenario."""

    scenario: str = LABEL_SHIFT
    schedule: str = LINEAR
    alpha: float = 0.1
    T: int = 100
    num_classes: int = 5
    input_dim: int = 10
    mean_scale: float = 2.0
    noise_std: float = 1.0
    corruption_max_severity: float = 0.0
    pretrain_prior_kind: str = UNIFORM
    sine_mode: str = SINE_CLAMP
    stationary: bool = False  # pin every client's target prior to Q0

    def __post_init__(self):
        if self.scenario not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.schedule not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.pretrain_prior_kind not in PRETRAIN_PRIOR_KINDS:
            raise ValueError(f"unknown pretrain prior {self.pretrain_prior_kind!r}")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario, "schedule": self.schedule,
            "alpha": self.alpha, "T": self.T,
            "num_classes": self.num_classes, "input_dim": self.input_dim,
            "mean_scale": self.mean_scale, "noise_std": self.noise_std,
            "corruption_max_severity": self.corruption_max_severity,
            "pretrain_prior_kind": self.pretrain_prior_kind,
            "sine_mode": self.sine_mode, "stationary": self.stationary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(**d)
