from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synfed import datakit, fedengine, secagg
from synfed.datakit import Dataset, LabelRegistry
from synfed.errors import DivergenceError, ValidationError, ZeroSumError
from synfed.fedengine import DIVERSITY_SENTINEL, AdamState, ClientUpdate, FLConfig
from synfed.nnkit import ModelArch, ParamVector, init_params
from synfed.trainer import Checkpoint

from conftest import blobs

ARCH = ModelArch(4, 6, 3)


def _upd(values, n=1, cid=0, arch=ARCH):
    return ClientUpdate(ParamVector(np.broadcast_to(np.asarray(values, dtype=float), (arch.n_params,)).copy(), arch), n, cid)


def _federation(n_clients=6, arch=ARCH, d=4, k=3, seed=0, **fl):
    ds = blobs(n_per_class=40, k=k, d=d, seed=seed)
    part = datakit.dirichlet_partition(ds, n_clients, 0.5, seed)
    init = Checkpoint(init_params(arch, seed), arch)
    cfg = FLConfig(**{"rounds": 3, "cohort_size": 3, "batch_size": 8, **fl})
    return init, ds, part, cfg


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"rounds": 0}, {"cohort_size": 0}, {"local_lr": 0.0}, {"prox_mu": -1.0},
        {"prox_mu": 0.1, "use_scaffold": True}, {"server_optimizer": "fedyogi"},
        {"secure_aggregation": True, "quant_bits": 8},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            FLConfig(**kw)

    def test_cohort_exceeds_clients(self):
        with pytest.raises(ValidationError):
            FLConfig(cohort_size=11).validate_for(10)


class TestCohort:
    def test_full_set(self):
        assert fedengine.sample_cohort(3, 7, 7, 0) == tuple(range(7))

    def test_size_unique_deterministic(self):
        for t in range(1, 50):
            s = fedengine.sample_cohort(t, 10, 100, 5)
            assert len(set(s)) == 10 and all(0 <= c < 100 for c in s)
            assert s == fedengine.sample_cohort(t, 10, 100, 5)

    def test_selection_frequency(self):
        # binomial(1000, 0.1): mean 100, sd about 9.5
        counts = np.zeros(100, dtype=int)
        for t in range(1, 1001):
            counts[list(fedengine.sample_cohort(t, 10, 100, 0))] += 1
        assert counts.min() >= 60 and counts.max() <= 140


class TestLocalUpdate:
    def test_quadratic_toy(self):
        # loss (w - 3)^2 / 2, w_global = 1, lr 0.1, one step
        cfg = FLConfig(local_lr=0.1, batch_size=1, local_epochs=1)
        w0 = np.array([1.0])
        y = fedengine.local_sgd(w0, lambda w, idx: w - 3.0, 1, cfg, 1, 0)
        assert y[0] == pytest.approx(1.2, abs=1e-15)
        assert y[0] - w0[0] == pytest.approx(0.2, abs=1e-15)
        c_new = fedengine.scaffold_variate(np.zeros(1), np.zeros(1), w0, y, 1, 0.1)
        assert c_new[0] == pytest.approx(-2.0, abs=1e-12)

    def test_quadratic_toy_with_prox(self):
        # prox adds mu * (w - w_global): zero on the first step, then pulls back
        cfg = FLConfig(local_lr=0.1, batch_size=1, local_epochs=2, prox_mu=1.0)
        y = fedengine.local_sgd(np.array([1.0]), lambda w, idx: w - 3.0, 1, cfg, 1, 0)
        # step 1: 1 - 0.1*(-2) = 1.2; step 2: 1.2 - 0.1*(-1.8 + 0.2) = 1.36
        assert y[0] == pytest.approx(1.36, abs=1e-14)

    def test_scaffold_zero_equals_plain(self):
        ds = blobs(n_per_class=5)
        g = init_params(ARCH, 1)
        cfg = FLConfig(batch_size=len(ds), local_epochs=1)
        plain, none_c = fedengine.local_update(g, ds, cfg, 2, 4)
        zero = ParamVector.zeros(ARCH)
        scaf, new_c = fedengine.local_update(g, ds, cfg, 2, 4, (zero, zero))
        assert none_c is None
        assert np.array_equal(plain.delta.values, scaf.delta.values)
        assert np.allclose(new_c.values, -plain.delta.values / cfg.local_lr, rtol=1e-12)

    def test_prox_zero_on_first_step(self):
        ds = blobs(n_per_class=5)
        g = init_params(ARCH, 1)
        cfg = FLConfig(batch_size=len(ds), local_epochs=1)
        plain, _ = fedengine.local_update(g, ds, cfg, 1, 0)
        prox, _ = fedengine.local_update(g, ds, replace(cfg, prox_mu=0.5), 1, 0)
        assert np.array_equal(plain.delta.values, prox.delta.values)

    def test_prox_shrinks_drift(self):
        ds = blobs(n_per_class=20)
        g = init_params(ARCH, 1)
        cfg = FLConfig(batch_size=4, local_epochs=3, local_lr=0.1)
        plain, _ = fedengine.local_update(g, ds, cfg, 1, 0)
        prox, _ = fedengine.local_update(g, ds, replace(cfg, prox_mu=5.0), 1, 0)
        assert prox.delta.sq_norm() < plain.delta.sq_norm()

    def test_step_count_and_samples(self):
        ds = blobs(n_per_class=7)  # 21 samples
        cfg = FLConfig(batch_size=8, local_epochs=2)
        assert fedengine.local_steps(len(ds), cfg) == 6
        upd, _ = fedengine.local_update(init_params(ARCH, 0), ds, cfg, 1, 3)
        assert upd.n_samples == 21 and upd.client_id == 3

    def test_deterministic_and_client_specific(self):
        ds = blobs(n_per_class=10)
        g = init_params(ARCH, 0)
        cfg = FLConfig(batch_size=4)
        a, _ = fedengine.local_update(g, ds, cfg, 1, 0)
        b, _ = fedengine.local_update(g, ds, cfg, 1, 0)
        c, _ = fedengine.local_update(g, ds, cfg, 1, 1)
        assert a.delta == b.delta
        assert a.delta != c.delta

    def test_divergence_names_client(self):
        ds = blobs(n_per_class=10)
        with pytest.raises(DivergenceError, match="client 7"):
            with np.errstate(all="ignore"):
                fedengine.local_update(init_params(ARCH, 0), ds, FLConfig(local_lr=1e200, batch_size=4), 1, 7)


class TestAggregation:
    def test_single_update(self):
        g = init_params(ARCH, 0)
        u = _upd(np.linspace(-1, 1, ARCH.n_params))
        assert np.array_equal(fedengine.aggregate_fedavg(g, [u]).values, g.values + u.delta.values)

    def test_cancellation(self):
        g = init_params(ARCH, 0)
        d = np.random.default_rng(0).standard_normal(ARCH.n_params)
        out = fedengine.aggregate_fedavg(g, [_upd(d, 5, 0), _upd(-d, 5, 1)])
        assert np.array_equal(out.values, g.values)

    def test_weighted_by_hand(self):
        g = ParamVector.zeros(ARCH)
        out = fedengine.aggregate_fedavg(g, [_upd(2.0, 1, 0), _upd(6.0, 3, 1)], weighted=True)
        assert np.all(out.values == 5.0)
        unweighted = fedengine.aggregate_fedavg(g, [_upd(2.0, 1, 0), _upd(6.0, 3, 1)], weighted=False)
        assert np.all(unweighted.values == 4.0)

    def test_empty(self):
        with pytest.raises(ValidationError):
            fedengine.aggregate_fedavg(ParamVector.zeros(ARCH), [])

    def test_order_independent(self):
        g = init_params(ARCH, 0)
        rng = np.random.default_rng(3)
        ups = [_upd(rng.standard_normal(ARCH.n_params), int(rng.integers(1, 9)), c) for c in range(5)]
        a = fedengine.aggregate_fedavg(g, ups)
        b = fedengine.aggregate_fedavg(g, ups[::-1])
        assert np.array_equal(a.values, b.values)

    def test_fedopt_zero_updates(self):
        g = init_params(ARCH, 0)
        out, st_ = fedengine.aggregate_fedopt(g, [_upd(0.0, 1, 0), _upd(0.0, 2, 1)], None, FLConfig(server_optimizer="fedopt_adam"))
        assert np.array_equal(out.values, g.values)
        assert st_.step == 1

    def test_fedopt_sgd_equals_unweighted_fedavg(self):
        g = init_params(ARCH, 0)
        rng = np.random.default_rng(1)
        ups = [_upd(rng.standard_normal(ARCH.n_params), int(rng.integers(1, 20)), c) for c in range(4)]
        cfg = FLConfig(server_optimizer="fedopt_sgd", server_lr=1.0)
        opt, _ = fedengine.aggregate_fedopt(g, ups, None, cfg)
        avg = fedengine.aggregate_fedavg(g, ups, weighted=False)
        assert np.array_equal(opt.values, avg.values)

    def test_adam_first_step_by_hand(self):
        g = ParamVector(np.full(ARCH.n_params, 4.0), ARCH)
        cfg = FLConfig(server_optimizer="fedopt_adam", server_lr=0.1)
        out, st_ = fedengine.aggregate_fedopt(g, [_upd(-2.0)], None, cfg)
        # g = 2, m_hat = 2, v_hat = 4: step = 0.1 * 2 / (2 + eps)
        expected = 4.0 - 0.1 * 2.0 / (2.0 + 1e-8)
        assert np.allclose(out.values, expected, rtol=0, atol=1e-15)
        assert out.values[0] == pytest.approx(3.9, abs=1e-8)
        assert np.allclose(st_.m, 0.2) and np.allclose(st_.v, 0.04)

    def test_adam_second_step_by_hand(self):
        cfg = FLConfig(server_optimizer="fedopt_adam", server_lr=0.1, adam_beta1=0.9, adam_beta2=0.99)
        g = ParamVector.zeros(ARCH)
        g1, s1 = fedengine.aggregate_fedopt(g, [_upd(-2.0)], None, cfg)
        g2, _ = fedengine.aggregate_fedopt(g1, [_upd(1.0)], s1, cfg)
        m = 0.9 * 0.2 + 0.1 * -1.0
        v = 0.99 * 0.04 + 0.01 * 1.0
        step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.99**2)) + 1e-8)
        assert np.allclose(g2.values, g1.values - step, rtol=0, atol=1e-15)


class TestDiversity:
    @pytest.mark.parametrize("s", [2, 4, 8])
    def test_identical(self, s):
        u = np.random.default_rng(s).standard_normal(10)
        assert fedengine.gradient_diversity([u] * s) == pytest.approx(1 / s, abs=1e-12)

    def test_orthogonal(self):
        assert fedengine.gradient_diversity(list(2.5 * np.eye(3))) == pytest.approx(1.0, abs=1e-12)

    def test_hand_value(self):
        assert fedengine.gradient_diversity([np.array([1.0, 0.0]), np.array([1.0, 1.0])]) == pytest.approx(0.6, abs=1e-15)

    def test_accepts_client_updates(self):
        assert fedengine.gradient_diversity([_upd(1.0, cid=0), _upd(1.0, cid=1)]) == pytest.approx(0.5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32), st.floats(1e-3, 1e3), st.booleans())
    def test_scale_invariance(self, seed, scale, negate):
        rng = np.random.default_rng(seed)
        ups = [rng.standard_normal(8) + 1.0 for _ in range(4)]
        c = -scale if negate else scale
        assert fedengine.gradient_diversity([c * u for u in ups]) == pytest.approx(fedengine.gradient_diversity(ups), rel=1e-12)

    def test_zero_sum(self):
        u = np.ones(4)
        with pytest.raises(ZeroSumError):
            fedengine.gradient_diversity([u, -u])

    def test_smoothing(self):
        out = fedengine.smooth_ema([DIVERSITY_SENTINEL, 1.0, 2.0, DIVERSITY_SENTINEL, 3.0])
        assert out[0] == DIVERSITY_SENTINEL
        assert out[1] == 1.0
        assert out[2] == pytest.approx(1.1)
        assert out[3] == pytest.approx(1.1)
        assert out[4] == pytest.approx(0.9 * 1.1 + 0.3)


class TestRunFederation:
    def test_trivial_run(self):
        arch = ModelArch(4, 6, 3)
        ds = blobs(n_per_class=4)
        part = datakit.dirichlet_partition(ds, 1, 1.0, 0)
        init = Checkpoint(init_params(arch, 0), arch)
        log = fedengine.run_federation(init, ds, part, ds, FLConfig(rounds=1, cohort_size=1, local_epochs=0))
        assert log.final.params == init.params
        assert log.records[0].gradient_diversity == DIVERSITY_SENTINEL

    def test_comm_closed_form(self):
        arch = ModelArch(22, 30, 10)
        assert arch.n_params == 1000
        ds = blobs(n_per_class=20, k=10, d=22)
        part = datakit.dirichlet_partition(ds, 20, 0.5, 0)
        init = Checkpoint(init_params(arch, 0), arch)
        log = fedengine.run_federation(init, ds, part, ds, FLConfig(rounds=5, cohort_size=10, batch_size=16))
        last = log.records[-1]
        assert last.cumulative_params_fl == 2 * 10 * 5 * 1000 == 100_000
        assert last.cumulative_params == 100_000 + 20 * 1000
        assert all(r.params_up == r.params_down == 10_000 for r in log.records[1:])
        assert log.records[0].params_down == 10_000 + 20_000
        cum = [r.cumulative_params for r in log.records]
        assert cum == sorted(cum)

    def test_comm_without_broadcast_and_scaffold(self):
        init, ds, part, cfg = _federation(use_scaffold=True, count_initial_broadcast=False)
        log = fedengine.run_federation(init, ds, part, ds, cfg)
        d = ARCH.n_params
        assert log.records[-1].cumulative_params == log.records[-1].cumulative_params_fl == 2 * 2 * 3 * 3 * d

    def test_deterministic(self):
        init, ds, part, cfg = _federation()
        a = fedengine.run_federation(init, ds, part, ds, cfg)
        b = fedengine.run_federation(init, ds, part, ds, cfg)
        assert a.final.params == b.final.params
        assert a.records == b.records

    @pytest.mark.parametrize("fl", [
        {"server_optimizer": "fedopt_adam", "server_lr": 0.01},
        {"prox_mu": 0.1},
        {"use_scaffold": True},
        {"weighted_aggregation": False},
    ])
    def test_variants_run_and_learn(self, fl):
        init, ds, part, cfg = _federation(rounds=15, **fl)
        log = fedengine.run_federation(init, ds, part, ds, cfg)
        assert log.records[-1].metrics.mean_loss < log.records[0].metrics.mean_loss

    def test_fedopt_sgd_matches_unweighted_fedavg_run(self):
        init, ds, part, cfg = _federation()
        a = fedengine.run_federation(init, ds, part, ds, replace(cfg, weighted_aggregation=False))
        b = fedengine.run_federation(init, ds, part, ds, replace(cfg, server_optimizer="fedopt_sgd"))
        assert a.final.params == b.final.params

    def test_secure_aggregation_within_quantization_bound(self):
        init, ds, part, cfg = _federation(rounds=1)
        plain = fedengine.run_federation(init, ds, part, ds, cfg)
        for bits in (16, 32):
            q = secagg.QuantConfig(bits, cfg.quant_clip)
            secure = fedengine.run_federation(init, ds, part, ds, replace(cfg, secure_aggregation=True, quant_bits=bits))
            diff = np.max(np.abs(secure.final.params.values - plain.final.params.values))
            # one rounding error of at most 1/(2 scale) per cohort member
            assert diff <= cfg.cohort_size / (2 * q.scale)
            assert diff <= 2 * cfg.quant_clip / 2**bits * ARCH.n_params

    def test_secure_aggregation_multi_round_close(self):
        init, ds, part, cfg = _federation(rounds=5)
        plain = fedengine.run_federation(init, ds, part, ds, cfg)
        secure = fedengine.run_federation(init, ds, part, ds, replace(cfg, secure_aggregation=True))
        bound = 2 * cfg.quant_clip / 2**32 * ARCH.n_params
        assert np.max(np.abs(secure.final.params.values - plain.final.params.values)) <= cfg.rounds * bound

    def test_csv_round_trip(self, tmp_path):
        init, ds, part, cfg = _federation()
        log = fedengine.run_federation(init, ds, part, ds, cfg)
        path = fedengine.write_rounds_csv(log, tmp_path / "rounds.csv")
        assert path.read_text().splitlines()[0] == ",".join(fedengine.CSV_COLUMNS)
        assert fedengine.read_rounds_csv(path) == log.records

    def test_cohort_larger_than_clients(self):
        init, ds, part, cfg = _federation(n_clients=2)
        with pytest.raises(ValidationError):
            fedengine.run_federation(init, ds, part, ds, cfg)

    def test_divergence_annotated_with_round(self):
        init, ds, part, cfg = _federation(local_lr=1e200)
        with pytest.raises(DivergenceError, match="round 1"):
            with np.errstate(all="ignore"):
                fedengine.run_federation(init, ds, part, ds, cfg)
