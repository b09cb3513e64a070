"""Federated post-adaptation loop.

Per timestep: every client draws a batch from its drifting distribution;
sampled participants estimate the current class prior, sense drift against
their cached batch summaries, pick a learning rate, and take joint SGD steps
on the reweighted anchor risk; on communication steps the server averages
the shared blocks, broadcasts to all clients, and participants refine their
personalized heads with the same rate; participants then cache their
summaries and every client is evaluated on the labeled version of its batch.

Determinism: every random draw comes from a stream derived from
(seed, purpose, client id), participants are processed in id order, and
aggregation reduces in id order, so results do not depend on scheduling.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from driftfl import estimation as est
from driftfl import kernels
from driftfl import model as mdl
from driftfl import rng as rngmod
from driftfl import shift
from driftfl.errors import CoverageError
from driftfl.numerics import l1_distance

ADAPTIVE = "adaptive"
FIXED = "fixed"

ANCHOR_RESAMPLE_LIMIT = 10


@dataclass
class RunConfig:
    num_clients: int = 100
    T: int = 100
    participant_rate: float = 0.1
    local_epochs: int = 4
    comm_interval: int = 1
    rate_mode: str = ADAPTIVE
    fixed_eta: float | None = None
    bounds: est.RateBounds = field(default_factory=lambda: est.RateBounds(5e-6, 1e-4))
    batch_size: int = 128
    anchor_size: int = 100
    bbse_ridge: float = est.DEFAULT_RIDGE
    scenario: shift.ScenarioSpec = field(default_factory=shift.ScenarioSpec)
    seed: int = 0
    hidden_dim: int = 16
    pretrain_samples: int = 5000
    pretrain_epochs: int = 300
    pretrain_eta: float = 0.5
    confusion_samples: int = 10000
    eval_participants_only: bool = False
    emit_oracle_diagnostics: bool = False
    checkpoint_interval: int = 0
    drift_measure: str = "cosine"
    anchor_minibatch: int = 0  # 0 = one full-batch step per local epoch

    def validate(self):
        problems = []
        for name in ("num_clients", "T", "local_epochs", "comm_interval",
                     "batch_size", "anchor_size", "hidden_dim",
                     "pretrain_samples", "pretrain_epochs", "confusion_samples"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if not 0.0 < self.participant_rate <= 1.0:
            problems.append("participant_rate must be in (0, 1]")
        if self.rate_mode not in (ADAPTIVE, FIXED):
            problems.append(f"unknown rate_mode {self.rate_mode!r}")
        if self.rate_mode == FIXED:
            if self.fixed_eta is None:
                problems.append("fixed rate mode requires fixed_eta")
            elif not (self.bounds.eta_min <= self.fixed_eta <= self.bounds.eta_max):
                problems.append(
                    f"fixed_eta {self.fixed_eta} outside RateBounds "
                    f"[{self.bounds.eta_min}, {self.bounds.eta_max}]")
        if self.bbse_ridge < 0:
            problems.append("bbse_ridge must be nonnegative")
        if self.scenario.T != self.T:
            problems.append(f"scenario.T ({self.scenario.T}) != T ({self.T})")
        if problems:
            raise ValueError("; ".join(problems))

    def mode_label(self) -> str:
        if self.rate_mode == ADAPTIVE:
            return ADAPTIVE
        return f"fixed_{self.fixed_eta:g}"


@dataclass
class StepSignals:
    """Everything a participant computed this timestep, before caching."""

    s_unc: float
    s_rep: float
    s: float
    eta: float
    weights: np.ndarray       # shift-corrected class prior estimate
    histogram: np.ndarray
    summary: est.BatchSummary
    train_risk: float = float("nan")  # weighted anchor risk before updating


@dataclass
class ClientState:
    id: int
    params: mdl.SplitParams
    anchor: mdl.LabeledBatch
    profile: shift.ClientShiftProfile
    prev_summary: est.BatchSummary
    sample_count: int
    data_rng: np.random.Generator
    schedule_rng: np.random.Generator
    pending: StepSignals | None = None


@dataclass
class RoundRecord:
    t: int
    participants: list
    client_metrics: dict       # id -> {accuracy, loss, s_unc, s_rep, s, eta, bbse_l1}
    mean_accuracy: float
    mean_eta: float
    mean_s: float
    diagnostics: dict | None = None  # id -> {q, bbse_prior, true_prior, eps}


@dataclass
class RunResult:
    records: list
    checkpoints: list   # (t, shared_W, shared_b) snapshots
    final_clients: list = field(default_factory=list)


def pretrain(task: shift.SyntheticTask, prior, n_samples: int, epochs: int,
             eta: float, rng: np.random.Generator,
             hidden_dim: int = 16) -> mdl.SplitParams:
    """Train the server model on pre-collected data with full-batch SGD."""
    if n_samples < task.num_classes * 10:
        raise ValueError("need at least 10 pretraining samples per class")
    data = shift.sample_batch(task, prior, n_samples, rng)
    params = mdl.init_params(rng, task.input_dim, hidden_dim, task.num_classes)
    coef = np.full(n_samples, 1.0 / n_samples)
    W1, b1 = params.shared_W, params.shared_b
    W2, b2 = params.head_W, params.head_b
    for _ in range(epochs):
        _, gW1, gb1, gW2, gb2 = kernels.risk_grads(
            W1, b1, W2, b2, data.features, data.labels, coef, False)
        W1 = W1 - eta * gW1
        b1 = b1 - eta * gb1
        W2 = W2 - eta * gW2
        b2 = b2 - eta * gb2
    return mdl.SplitParams(W1, b1, W2, b2)


def _draw_anchor(task, prior, size, rng) -> mdl.LabeledBatch:
    last_exc = None
    for _ in range(ANCHOR_RESAMPLE_LIMIT):
        batch = shift.sample_batch(task, prior, size, rng)
        counts = np.bincount(batch.labels, minlength=task.num_classes)
        if np.all(counts > 0):
            return batch
        last_exc = CoverageError(
            f"anchor draw missing class(es) "
            f"{np.nonzero(counts == 0)[0].tolist()}",
            missing_classes=np.nonzero(counts == 0)[0].tolist())
    raise last_exc


def init_clients(config: RunConfig, global_params: mdl.SplitParams,
                 task: shift.SyntheticTask) -> list:
    """Per-client state: copied global model, anchor set, drift profile."""
    spec = config.scenario
    q0 = shift.pretrain_prior(spec.pretrain_prior_kind, spec.num_classes)
    if spec.scenario == shift.LABEL_SHIFT and not spec.stationary:
        targets = shift.sample_dirichlet_priors(
            spec.alpha, config.num_clients, spec.num_classes,
            rngmod.stream(config.seed, "server", "targets"))
    else:
        targets = np.tile(q0, (config.num_clients, 1))
    if spec.scenario == shift.COVARIATE_SHIFT:
        sev_rng = rngmod.stream(config.seed, "server", "severity")
        caps = spec.corruption_max_severity * sev_rng.uniform(
            0.5, 1.0, size=config.num_clients)
    else:
        caps = np.zeros(config.num_clients)

    clients = []
    for cid in range(config.num_clients):
        anchor = _draw_anchor(task, q0, config.anchor_size,
                              rngmod.stream(config.seed, "client", cid, "anchor"))
        profile = shift.ClientShiftProfile(
            initial_prior=q0,
            target_prior=targets[cid],
            schedule=shift.ShiftSchedule(spec.schedule, spec.T, spec.sine_mode),
            scenario=spec.scenario,
            corruption_max_severity=float(caps[cid]),
        )
        clients.append(ClientState(
            id=cid,
            params=global_params.copy(),
            anchor=anchor,
            profile=profile,
            prev_summary=est.batch_summary(global_params, anchor.unlabeled()),
            sample_count=config.batch_size,
            data_rng=rngmod.stream(config.seed, "client", cid, "data"),
            schedule_rng=rngmod.stream(config.seed, "client", cid, "schedule"),
        ))
    return clients


def aggregate_shared(entries) -> tuple:
    """Size-weighted average of shared blocks: sum(N_c * psi_c) / sum(N_c)."""
    entries = list(entries)
    if not entries:
        raise ValueError("nothing to aggregate")
    total = float(sum(n for _, _, n in entries))
    if total <= 0:
        raise ValueError("aggregation weights must be positive")
    W = sum(n * w for w, _, n in entries) / total
    b = sum(n * v for _, v, n in entries) / total
    return W, b


def _local_updates(params, anchor, weights, eta, epochs, which,
                   minibatch, mb_rng):
    """Local SGD epochs; returns (params, risk before the first update)."""
    if minibatch and minibatch < len(anchor):
        first_risk = mdl.weighted_risk(params, anchor, weights)
        for _ in range(epochs):
            order = mb_rng.permutation(len(anchor))
            for start in range(0, len(anchor), minibatch):
                idx = order[start:start + minibatch]
                sub = mdl.LabeledBatch(anchor.features[idx], anchor.labels[idx])
                grads = grad_or_zero(params, sub, weights, which)
                params = mdl.sgd_step(params, grads, eta, which)
        return params, first_risk
    # full-batch path, kernel-direct: this is the simulator's hot loop
    w = np.asarray(weights, dtype=np.float64)
    coef = mdl.per_sample_coefficients(anchor.labels, w, params.num_classes)
    W1, b1 = params.shared_W, params.shared_b
    W2, b2 = params.head_W, params.head_b
    head_only = which == mdl.HEAD_ONLY
    first_risk = float("nan")
    for epoch in range(epochs):
        loss, gW1, gb1, gW2, gb2 = kernels.risk_grads(
            W1, b1, W2, b2, anchor.features, anchor.labels, coef, head_only)
        if epoch == 0:
            first_risk = float(loss)
        if not head_only:
            W1 = W1 - eta * gW1
            b1 = b1 - eta * gb1
        W2 = W2 - eta * gW2
        b2 = b2 - eta * gb2
    if head_only:
        W1 = W1.copy()
        b1 = b1.copy()
    return mdl.SplitParams(W1, b1, W2, b2), first_risk


def grad_or_zero(params, batch, weights, which):
    """Minibatch slices may miss classes; absent classes contribute nothing."""
    w = np.asarray(weights, dtype=np.float64)
    counts = np.bincount(batch.labels, minlength=params.num_classes)
    present = counts > 0
    if np.all(present):
        return mdl.grad_weighted_risk(params, batch, w, which)
    masked = np.where(present, w, 0.0)
    coef = np.where(counts[batch.labels] > 0,
                    masked[batch.labels] / np.maximum(counts[batch.labels], 1), 0.0)
    _, gW1, gb1, gW2, gb2 = kernels.risk_grads(
        params.shared_W, params.shared_b, params.head_W, params.head_b,
        batch.features, batch.labels, coef, which == mdl.HEAD_ONLY)
    return mdl.SplitGrads(gW1, gb1, gW2, gb2)


def client_step(client: ClientState, batch: mdl.UnlabeledBatch,
                conf: est.ConfusionMatrix, config: RunConfig):
    """One participant timestep: estimate, sense drift, joint local updates.

    Returns (updated client, (shared_W, shared_b, N_c) upload, StepSignals).
    The cached summary is deliberately not replaced here; that happens after
    the head refinement at the end of the round.
    """
    H, P = mdl.forward_batch(client.params, batch.features)
    hist = np.bincount(np.argmax(P, axis=1),
                       minlength=client.params.num_classes) / len(batch)
    weights = est.bbse_estimate(conf, hist, config.bbse_ridge)
    summary = est.summarize_batch(H, P)

    prev = client.prev_summary
    if config.drift_measure == "cosine":
        s_unc = est.uncertainty_signal(prev.mean_probs, summary.mean_probs)
    else:
        measure = est.drift_measure(config.drift_measure)
        s_unc = min(1.0, float(measure(prev.mean_probs, summary.mean_probs)))
    if (np.linalg.norm(prev.mean_feature) < 1e-12
            or np.linalg.norm(summary.mean_feature) < 1e-12):
        s_rep = 0.0  # dead batch: no drift evidence
    else:
        s_rep = est.representation_signal(prev.mean_feature, summary.mean_feature)
    s = est.combine_signals(s_unc, s_rep)
    if config.rate_mode == ADAPTIVE:
        eta = est.adaptive_rate(s, config.bounds)
    else:
        eta = float(config.fixed_eta)

    mb_rng = client.data_rng  # minibatch shuffles ride the client data stream
    params, train_risk = _local_updates(client.params, client.anchor, weights,
                                        eta, config.local_epochs, mdl.JOINT,
                                        config.anchor_minibatch, mb_rng)
    signals = StepSignals(s_unc=s_unc, s_rep=s_rep, s=s, eta=eta,
                          weights=weights, histogram=hist, summary=summary,
                          train_risk=train_risk)
    updated = replace(client, params=params, pending=signals)
    upload = (params.shared_W, params.shared_b, client.sample_count)
    return updated, upload, signals


def head_refine(client: ClientState, config: RunConfig) -> ClientState:
    """Freeze the shared block and adapt only the head, reusing this
    timestep's rate and estimated prior."""
    if client.pending is None:
        raise ValueError("head_refine requires a pending client_step")
    params, _ = _local_updates(client.params, client.anchor,
                               client.pending.weights, client.pending.eta,
                               config.local_epochs, mdl.HEAD_ONLY,
                               config.anchor_minibatch, client.data_rng)
    return replace(client, params=params)


def finish_round(client: ClientState) -> ClientState:
    """Cache this round's batch summary for the next drift comparison."""
    if client.pending is None:
        return client
    return replace(client, prev_summary=client.pending.summary, pending=None)


def run(config: RunConfig, task: shift.SyntheticTask | None = None) -> RunResult:
    """Execute the full loop; one RoundRecord per timestep."""
    config.validate()
    spec = config.scenario
    if task is None:
        task = shift.make_task(spec.num_classes, spec.input_dim,
                               spec.mean_scale, spec.noise_std,
                               rngmod.stream(config.seed, "task"))
    q0 = shift.pretrain_prior(spec.pretrain_prior_kind, spec.num_classes)
    global_params = pretrain(task, q0, config.pretrain_samples,
                             config.pretrain_epochs, config.pretrain_eta,
                             rngmod.stream(config.seed, "server", "pretrain"),
                             hidden_dim=config.hidden_dim)
    conf_data = shift.sample_batch(task, q0, config.confusion_samples,
                                   rngmod.stream(config.seed, "server", "confusion"))
    conf = est.build_confusion(global_params, conf_data)
    clients = init_clients(config, global_params, task)

    part_rng = rngmod.stream(config.seed, "server", "participants")
    n_participants = math.ceil(config.participant_rate * config.num_clients)
    records = []
    checkpoints = []

    for t in range(1, config.T + 1):
        chosen = np.sort(part_rng.permutation(config.num_clients)[:n_participants])
        chosen_set = set(int(c) for c in chosen)

        # every client's stream advances every step, participant or not
        batches = []
        true_priors = []
        for client in clients:
            w = shift.omega(client.profile.schedule, t, client.schedule_rng)
            prior_t = client.profile.prior_at(w)
            batch = shift.sample_batch(task, prior_t, config.batch_size,
                                       client.data_rng)
            severity = client.profile.severity_at(w)
            if severity > 0:
                batch = shift.corrupt(batch, severity, client.data_rng)
            batches.append(batch)
            true_priors.append(prior_t)

        uploads = []
        signals_by_id = {}
        for cid in chosen:
            client = clients[cid]
            updated, upload, signals = client_step(
                client, batches[cid].unlabeled(), conf, config)
            clients[cid] = updated
            uploads.append(upload)
            signals_by_id[int(cid)] = signals

        comm_step = (t % config.comm_interval == 0)
        if comm_step:
            shared_W, shared_b = aggregate_shared(uploads)
            for client in clients:
                client.params = mdl.SplitParams(
                    shared_W.copy(), shared_b.copy(),
                    client.params.head_W.copy(), client.params.head_b.copy())
            for cid in chosen:
                clients[cid] = head_refine(clients[cid], config)
            if config.checkpoint_interval and t % config.checkpoint_interval == 0:
                checkpoints.append((t, shared_W.copy(), shared_b.copy()))

        for cid in chosen:
            clients[cid] = finish_round(clients[cid])

        evaluated = chosen_set if config.eval_participants_only else range(
            config.num_clients)
        client_metrics = {}
        diagnostics = {} if config.emit_oracle_diagnostics else None
        for cid in evaluated:
            client = clients[cid]
            batch = batches[cid]
            acc = mdl.accuracy(client.params, batch)
            loss = mdl.mean_cross_entropy(client.params, batch)
            if cid in chosen_set:
                sig = signals_by_id[cid]
                bbse_l1 = l1_distance(sig.weights, true_priors[cid])
                metrics = {"accuracy": acc, "loss": loss,
                           "s_unc": sig.s_unc, "s_rep": sig.s_rep,
                           "s": sig.s, "eta": sig.eta, "bbse_l1": bbse_l1,
                           "train_risk": sig.train_risk}
                if diagnostics is not None:
                    q = sig.summary.mean_probs
                    diagnostics[cid] = {
                        "q": q.copy(),
                        "z": sig.summary.mean_feature.copy(),
                        "bbse_prior": sig.weights.copy(),
                        "true_prior": true_priors[cid].copy(),
                        "eps": float(np.linalg.norm(q - true_priors[cid])),
                    }
            else:
                metrics = {"accuracy": acc, "loss": loss,
                           "s_unc": float("nan"), "s_rep": float("nan"),
                           "s": float("nan"), "eta": float("nan"),
                           "bbse_l1": float("nan"), "train_risk": float("nan")}
            client_metrics[int(cid)] = metrics

        mean_acc = float(np.mean([m["accuracy"] for m in client_metrics.values()]))
        mean_eta = float(np.mean([signals_by_id[c].eta for c in sorted(chosen_set)]))
        mean_s = float(np.mean([signals_by_id[c].s for c in sorted(chosen_set)]))
        records.append(RoundRecord(
            t=t, participants=[int(c) for c in chosen],
            client_metrics=client_metrics,
            mean_accuracy=mean_acc, mean_eta=mean_eta, mean_s=mean_s,
            diagnostics=diagnostics))
    return RunResult(records=records, checkpoints=checkpoints,
                     final_clients=clients)
