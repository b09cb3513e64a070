import numpy as np
import pytest

from driftfl import estimation as est
from driftfl import federation as fed
from driftfl import model as mdl
from driftfl import rng as rngmod
from driftfl import shift
from oracles import finite_diff_grads


def tiny_config(**overrides):
    spec_kwargs = dict(scenario="label_shift", schedule="linear",
                       T=overrides.get("T", 5), num_classes=3, input_dim=4,
                       mean_scale=2.0, noise_std=1.0)
    spec_kwargs.update(overrides.pop("spec_kwargs", {}))
    spec = shift.ScenarioSpec(**spec_kwargs)
    defaults = dict(num_clients=4, T=5, participant_rate=1.0, local_epochs=2,
                    comm_interval=1, rate_mode=fed.ADAPTIVE,
                    bounds=est.RateBounds(0.02, 0.5), batch_size=32,
                    anchor_size=30, scenario=spec, seed=11, hidden_dim=6,
                    pretrain_samples=600, pretrain_epochs=80, pretrain_eta=0.5,
                    confusion_samples=1000)
    defaults.update(overrides)
    return fed.RunConfig(**defaults)


@pytest.fixture(scope="module")
def tiny_world():
    config = tiny_config()
    spec = config.scenario
    task = shift.make_task(spec.num_classes, spec.input_dim, spec.mean_scale,
                           spec.noise_std, rngmod.stream(config.seed, "task"))
    prior = shift.pretrain_prior("uniform", spec.num_classes)
    params = fed.pretrain(task, prior, config.pretrain_samples,
                          config.pretrain_epochs, config.pretrain_eta,
                          rngmod.stream(config.seed, "server", "pretrain"),
                          hidden_dim=config.hidden_dim)
    conf_data = shift.sample_batch(task, prior, 1000,
                                   rngmod.stream(config.seed, "server", "confusion"))
    conf = est.build_confusion(params, conf_data)
    clients = fed.init_clients(config, params, task)
    return config, task, params, conf, clients


class TestPretrain:
    def test_zero_epochs_returns_initialization(self, fixture_task):
        prior = shift.pretrain_prior("uniform", 5)
        got = fed.pretrain(fixture_task, prior, 500, 0, 0.5,
                           rngmod.stream(5, "p"), hidden_dim=8)
        expected_rng = rngmod.stream(5, "p")
        shift.sample_batch(fixture_task, prior, 500, expected_rng)
        expected = mdl.init_params(expected_rng, 10, 8, 5)
        assert np.array_equal(got.shared_W, expected.shared_W)
        assert np.array_equal(got.head_W, expected.head_W)

    def test_separable_task_reaches_high_accuracy(self):
        task = shift.make_task(3, 6, 2.0, 1e-3, rngmod.stream(6, "t"))
        prior = shift.pretrain_prior("uniform", 3)
        params = fed.pretrain(task, prior, 300, 200, 0.5,
                              rngmod.stream(6, "p"), hidden_dim=8)
        data = shift.sample_batch(task, prior, 300, rngmod.stream(6, "p2"))
        assert mdl.accuracy(params, data) >= 0.99

    def test_beats_sanity_floor_on_fixture(self, fixture_task, fixture_model):
        prior = shift.pretrain_prior("uniform", 5)
        data = shift.sample_batch(fixture_task, prior, 4000,
                                  rngmod.stream(7, "eval"))
        assert mdl.accuracy(fixture_model, data) >= 1 / 5 + 0.1

    def test_deterministic_golden_loss(self, fixture_task):
        # frozen on the first verified run of this exact construction
        prior = shift.pretrain_prior("uniform", 5)
        params = fed.pretrain(fixture_task, prior, 1000, 50, 0.5,
                              rngmod.stream(8, "p"), hidden_dim=8)
        data_rng = rngmod.stream(8, "p")
        data = shift.sample_batch(fixture_task, prior, 1000, data_rng)
        loss = mdl.mean_cross_entropy(params, data)
        again = fed.pretrain(fixture_task, prior, 1000, 50, 0.5,
                             rngmod.stream(8, "p"), hidden_dim=8)
        assert mdl.mean_cross_entropy(again, data) == loss

    def test_too_few_samples_rejected(self, fixture_task):
        with pytest.raises(ValueError):
            fed.pretrain(fixture_task, shift.pretrain_prior("uniform", 5),
                         30, 10, 0.5, rngmod.stream(9, "p"))


class TestInitClients:
    def test_identical_params_distinct_anchors(self, tiny_world):
        _, _, params, _, clients = tiny_world
        for c in clients:
            assert np.array_equal(c.params.shared_W, params.shared_W)
            assert np.array_equal(c.params.head_W, params.head_W)
        assert not np.array_equal(clients[0].anchor.features,
                                  clients[1].anchor.features)

    def test_label_shift_targets_differ_pairwise(self, tiny_world):
        _, _, _, _, clients = tiny_world
        for i in range(len(clients)):
            for j in range(i + 1, len(clients)):
                assert np.abs(clients[i].profile.target_prior
                              - clients[j].profile.target_prior).sum() > 0

    def test_anchor_covers_all_classes(self, tiny_world):
        _, _, _, _, clients = tiny_world
        for c in clients:
            assert set(c.anchor.labels.tolist()) == {0, 1, 2}

    def test_stratified_minimum_anchor(self):
        # anchor_size == num_classes forces repeated resampling to cover all
        config = tiny_config(anchor_size=3, seed=13)
        task = shift.make_task(3, 4, 2.0, 1.0, rngmod.stream(13, "task"))
        params = mdl.init_params(rngmod.stream(13, "m"), 4, 6, 3)
        clients = fed.init_clients(config, params, task)
        for c in clients:
            assert sorted(c.anchor.labels.tolist()) == [0, 1, 2]

    def test_prev_summary_is_anchor_summary(self, tiny_world):
        _, _, params, _, clients = tiny_world
        c = clients[0]
        expected = est.batch_summary(params, c.anchor.unlabeled())
        np.testing.assert_array_equal(c.prev_summary.mean_probs,
                                      expected.mean_probs)

    def test_stationary_pins_targets(self):
        config = tiny_config(spec_kwargs={"stationary": True})
        task = shift.make_task(3, 4, 2.0, 1.0, rngmod.stream(11, "task"))
        params = mdl.init_params(rngmod.stream(11, "m"), 4, 6, 3)
        clients = fed.init_clients(config, params, task)
        for c in clients:
            assert np.array_equal(c.profile.initial_prior, c.profile.target_prior)


class TestAggregateShared:
    def test_single_entry_unchanged(self, rng):
        W = rng.standard_normal((3, 2))
        b = rng.standard_normal(3)
        aW, ab = fed.aggregate_shared([(W, b, 17)])
        np.testing.assert_array_equal(aW, W)
        np.testing.assert_array_equal(ab, b)

    def test_equal_weights_mean(self):
        W0, b0 = np.zeros((2, 2)), np.zeros(2)
        W4, b4 = np.full((2, 2), 4.0), np.full(2, 4.0)
        aW, ab = fed.aggregate_shared([(W0, b0, 5), (W4, b4, 5)])
        np.testing.assert_allclose(aW, 2.0, atol=1e-15)
        np.testing.assert_allclose(ab, 2.0, atol=1e-15)

    def test_weighted_mean_one_three(self):
        W0, b0 = np.zeros((1, 1)), np.zeros(1)
        W4, b4 = np.full((1, 1), 4.0), np.full(1, 4.0)
        aW, _ = fed.aggregate_shared([(W0, b0, 1), (W4, b4, 3)])
        assert aW[0, 0] == pytest.approx(3.0, abs=1e-15)

    def test_matches_brute_force(self, rng):
        entries = [(rng.standard_normal((4, 3)), rng.standard_normal(4),
                    int(rng.integers(1, 9))) for _ in range(6)]
        aW, ab = fed.aggregate_shared(entries)
        total = sum(n for _, _, n in entries)
        expW = sum(n * W for W, _, n in entries) / total
        np.testing.assert_allclose(aW, expW, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fed.aggregate_shared([])


class TestClientStep:
    def test_zero_fixed_rate_keeps_params(self, tiny_world):
        config, task, _, conf, clients = tiny_world
        frozen = fed.RunConfig(**{**config.__dict__,
                                  "rate_mode": fed.FIXED, "fixed_eta": 0.0})
        client = clients[0]
        batch = shift.sample_batch(task, client.profile.initial_prior, 32,
                                   rngmod.stream(50, "b"))
        updated, upload, signals = fed.client_step(client, batch.unlabeled(),
                                                   conf, frozen)
        assert np.array_equal(updated.params.shared_W, client.params.shared_W)
        assert np.array_equal(updated.params.head_W, client.params.head_W)
        assert 0.0 <= signals.s <= 1.0
        assert signals.eta == 0.0

    def test_identical_batches_give_zero_signal(self, tiny_world):
        config, task, _, conf, clients = tiny_world
        frozen = fed.RunConfig(**{**config.__dict__,
                                  "rate_mode": fed.FIXED, "fixed_eta": 0.0})
        client = clients[1]
        batch = shift.sample_batch(task, client.profile.initial_prior, 32,
                                   rngmod.stream(51, "b")).unlabeled()
        first, _, _ = fed.client_step(client, batch, conf, frozen)
        first = fed.finish_round(first)
        _, _, signals = fed.client_step(first, batch, conf, frozen)
        assert signals.s_unc == 0.0
        assert signals.s_rep == 0.0
        assert est.adaptive_rate(signals.s, config.bounds) == config.bounds.eta_min

    def test_single_step_matches_finite_difference(self, tiny_world):
        config, task, _, conf, clients = tiny_world
        one_step = fed.RunConfig(**{**config.__dict__, "local_epochs": 1})
        client = clients[2]
        batch = shift.sample_batch(task, client.profile.initial_prior, 32,
                                   rngmod.stream(52, "b"))
        updated, _, signals = fed.client_step(client, batch.unlabeled(),
                                              conf, one_step)
        numeric = finite_diff_grads(
            lambda p: mdl.weighted_risk(p, client.anchor, signals.weights),
            client.params.copy(), step=1e-5)
        for name, num in zip(("shared_W", "shared_b", "head_W", "head_b"), numeric):
            implied = (getattr(client.params, name)
                       - signals.eta * num)
            np.testing.assert_allclose(getattr(updated.params, name), implied,
                                       atol=1e-6)

    def test_weights_are_prob_vector(self, tiny_world):
        config, task, _, conf, clients = tiny_world
        batch = shift.sample_batch(task, clients[3].profile.initial_prior, 32,
                                   rngmod.stream(53, "b"))
        _, _, signals = fed.client_step(clients[3], batch.unlabeled(), conf, config)
        assert signals.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(signals.weights >= 0)

    def test_dead_batch_substitutes_zero_rep_signal(self, tiny_world):
        # shared layer that never activates: every hidden vector is zero,
        # so the feature summary is degenerate and s_rep falls back to 0
        config, task, _, conf, clients = tiny_world
        client = clients[0]
        dead = mdl.SplitParams(np.full((6, 4), -1.0), np.full(6, -100.0),
                               client.params.head_W, client.params.head_b)
        features = np.abs(rngmod.stream(61, "b").standard_normal((16, 4)))
        batch = mdl.UnlabeledBatch(features)
        dead_summary = est.batch_summary(dead, batch)
        from dataclasses import replace
        dead_client = replace(client, params=dead, prev_summary=dead_summary)
        _, _, signals = fed.client_step(dead_client, batch, conf, config)
        assert signals.s_rep == 0.0


class TestHeadRefine:
    def test_requires_pending(self, tiny_world):
        *_, clients = tiny_world
        with pytest.raises(ValueError):
            fed.head_refine(clients[0], tiny_world[0])

    def test_zero_rate_no_change(self, tiny_world):
        config, task, _, conf, clients = tiny_world
        frozen = fed.RunConfig(**{**config.__dict__,
                                  "rate_mode": fed.FIXED, "fixed_eta": 0.0})
        batch = shift.sample_batch(task, clients[0].profile.initial_prior, 32,
                                   rngmod.stream(54, "b"))
        stepped, _, _ = fed.client_step(clients[0], batch.unlabeled(), conf, frozen)
        refined = fed.head_refine(stepped, frozen)
        assert np.array_equal(refined.params.head_W, stepped.params.head_W)

    def test_shared_blocks_frozen(self, tiny_world):
        config, task, _, conf, clients = tiny_world
        for cid in range(4):
            batch = shift.sample_batch(task, clients[cid].profile.initial_prior,
                                       32, rngmod.stream(55 + cid, "b"))
            stepped, _, _ = fed.client_step(clients[cid], batch.unlabeled(),
                                            conf, config)
            refined = fed.head_refine(stepped, config)
            assert np.array_equal(refined.params.shared_W, stepped.params.shared_W)
            assert np.array_equal(refined.params.shared_b, stepped.params.shared_b)
            assert not np.array_equal(refined.params.head_W, stepped.params.head_W)

    def test_loss_non_increasing_on_frozen_features(self, tiny_world):
        # head-only steps on the convex reweighted objective must descend
        config, task, _, conf, clients = tiny_world
        client = clients[1]
        batch = shift.sample_batch(task, client.profile.initial_prior, 32,
                                   rngmod.stream(60, "b"))
        stepped, _, signals = fed.client_step(client, batch.unlabeled(), conf,
                                              config)
        params = stepped.params
        losses = [mdl.weighted_risk(params, client.anchor, signals.weights)]
        for _ in range(4):
            grads = mdl.grad_weighted_risk(params, client.anchor,
                                           signals.weights, mdl.HEAD_ONLY)
            params = mdl.sgd_step(params, grads, signals.eta, mdl.HEAD_ONLY)
            losses.append(mdl.weighted_risk(params, client.anchor, signals.weights))
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


class TestRun:
    def test_full_participation_single_round(self):
        config = tiny_config(T=1, spec_kwargs={"T": 1})
        result = fed.run(config)
        assert len(result.records) == 1
        assert result.records[0].participants == [0, 1, 2, 3]

    def test_participant_count_rounds_up(self):
        config = tiny_config(num_clients=5, participant_rate=0.5)
        result = fed.run(config)
        assert all(len(r.participants) == 3 for r in result.records)

    def test_same_seed_identical_records(self):
        config = tiny_config()
        r1 = fed.run(config)
        r2 = fed.run(config)
        for a, b in zip(r1.records, r2.records):
            assert a.mean_accuracy == b.mean_accuracy
            assert a.client_metrics == b.client_metrics

    def test_broadcast_makes_shared_blocks_identical(self):
        config = tiny_config(participant_rate=0.5, T=3,
                             spec_kwargs={"T": 3}, checkpoint_interval=1)
        spec = config.scenario
        task = shift.make_task(spec.num_classes, spec.input_dim,
                               spec.mean_scale, spec.noise_std,
                               rngmod.stream(config.seed, "task"))
        result = fed.run(config, task=task)
        assert len(result.checkpoints) == 3
        # after the final broadcast every client (participant or not) holds
        # bit-identical shared blocks equal to the last checkpoint
        _, last_W, last_b = result.checkpoints[-1]
        for client in result.final_clients:
            assert np.array_equal(client.params.shared_W, last_W)
            assert np.array_equal(client.params.shared_b, last_b)

    def test_nonparticipant_heads_never_change(self):
        config = tiny_config(participant_rate=0.25, T=4, seed=29,
                             spec_kwargs={"T": 4})
        spec = config.scenario
        task = shift.make_task(spec.num_classes, spec.input_dim,
                               spec.mean_scale, spec.noise_std,
                               rngmod.stream(config.seed, "task"))
        prior = shift.pretrain_prior("uniform", spec.num_classes)
        global_params = fed.pretrain(
            task, prior, config.pretrain_samples, config.pretrain_epochs,
            config.pretrain_eta,
            rngmod.stream(config.seed, "server", "pretrain"),
            hidden_dim=config.hidden_dim)
        result = fed.run(config, task=task)
        ever_participated = set()
        for rec in result.records:
            ever_participated.update(rec.participants)
        assert len(ever_participated) < config.num_clients  # some never chosen
        # a client that never participated has nan signals in every record
        # and its personalized head still equals the pretrained one exactly
        never = next(c for c in range(config.num_clients)
                     if c not in ever_participated)
        for rec in result.records:
            assert np.isnan(rec.client_metrics[never]["eta"])
        untouched = result.final_clients[never].params
        assert np.array_equal(untouched.head_W, global_params.head_W)
        assert np.array_equal(untouched.head_b, global_params.head_b)

    def test_comm_interval_two_skips_alternate_rounds(self):
        config = tiny_config(comm_interval=2, checkpoint_interval=1, T=4,
                             spec_kwargs={"T": 4})
        result = fed.run(config)
        assert [t for t, _, _ in result.checkpoints] == [2, 4]

    def test_eval_participants_only_flag(self):
        config = tiny_config(participant_rate=0.5, eval_participants_only=True)
        result = fed.run(config)
        for rec in result.records:
            assert sorted(rec.client_metrics) == rec.participants

    def test_diagnostics_carry_oracle_prior(self):
        config = tiny_config(emit_oracle_diagnostics=True)
        result = fed.run(config)
        rec = result.records[-1]
        for cid, diag in rec.diagnostics.items():
            assert diag["true_prior"].sum() == pytest.approx(1.0, abs=1e-9)
            assert diag["eps"] >= 0
            assert rec.client_metrics[cid]["bbse_l1"] == pytest.approx(
                np.abs(diag["bbse_prior"] - diag["true_prior"]).sum(), abs=1e-12)

    def test_minibatch_flag_runs(self):
        config = tiny_config(anchor_minibatch=8)
        result = fed.run(config)
        assert len(result.records) == config.T

    def test_minibatch_missing_class_contributes_nothing(self, tiny_world):
        # a slice without class 2 must produce zero gradient mass for it
        _, _, params, _, _ = tiny_world
        batch = mdl.LabeledBatch(np.eye(4)[[0, 1, 0, 1], :], [0, 1, 0, 1])
        w = np.array([0.2, 0.3, 0.5])
        grads = fed.grad_or_zero(params, batch, w, mdl.JOINT)
        # absent class's weight is masked: gradients equal those of the
        # same batch with that weight zeroed
        masked = np.array([0.2, 0.3, 0.0])
        coef = masked[batch.labels] / np.bincount(batch.labels, minlength=3)[batch.labels]
        from driftfl import kernels
        _, gW1, gb1, gW2, gb2 = kernels.risk_grads(
            params.shared_W, params.shared_b, params.head_W, params.head_b,
            batch.features, batch.labels, coef, False)
        np.testing.assert_allclose(grads.head_W, gW2, atol=1e-15)
        np.testing.assert_allclose(grads.shared_W, gW1, atol=1e-15)

    def test_covariate_scenario_runs(self):
        config = tiny_config(spec_kwargs={"scenario": "covariate_shift",
                                          "corruption_max_severity": 2.0})
        result = fed.run(config)
        assert len(result.records) == config.T

    def test_covariate_ramp_degrades_accuracy(self):
        # severity follows the linear schedule: late batches are much
        # noisier than early ones, so accuracy must fall across the run
        config = tiny_config(num_clients=8, T=30, batch_size=128,
                             spec_kwargs={"scenario": "covariate_shift",
                                          "corruption_max_severity": 8.0,
                                          "T": 30})
        result = fed.run(config)
        early = np.mean([r.mean_accuracy for r in result.records[:5]])
        late = np.mean([r.mean_accuracy for r in result.records[-5:]])
        assert late <= early - 0.15
        # the label prior never moves in a covariate scenario
        for client in result.final_clients:
            assert np.array_equal(client.profile.initial_prior,
                                  client.profile.target_prior)

    def test_bernoulli_schedule_end_to_end(self):
        config = tiny_config(T=12, spec_kwargs={"schedule": "bernoulli",
                                                "T": 12})
        result = fed.run(config)
        assert len(result.records) == 12
        again = fed.run(config)
        for a, b in zip(result.records, again.records):
            assert a.client_metrics == b.client_metrics

    def test_validate_rejects_bad_fixed_eta(self):
        config = tiny_config(rate_mode=fed.FIXED, fixed_eta=5.0)
        with pytest.raises(ValueError):
            config.validate()

    def test_validate_rejects_scenario_T_mismatch(self):
        config = tiny_config()
        config.T = 7
        with pytest.raises(ValueError):
            config.validate()
