"""Routing, priors, the variational oracle, and the state/prior tradeoff."""

import numpy as np
import pytest

from rankmem import numerics as nx
from rankmem import router as rt


def make_setup(m=4, rank=3, d_key=6, d_ctx=5, seed=0, **overrides):
    bank = rt.AtomBank.init_random(m, rank, d_key, seed)
    rng = np.random.default_rng(seed + 1)
    params = rt.RouterParams(
        q_cur=rng.standard_normal((d_key, rank)) / np.sqrt(rank),
        q_dep=rng.standard_normal((d_key, rank)) / np.sqrt(rank),
        q_ctx=rng.standard_normal((d_key, d_ctx)) / np.sqrt(d_ctx),
        r_ctx=rng.standard_normal((d_key, d_ctx)) / np.sqrt(d_ctx),
        q_dep_q=rng.standard_normal((d_key, d_key)) / np.sqrt(d_key),
        q_dep_k=rng.standard_normal((d_key, rank)) / np.sqrt(rank),
        layer_priors=rng.standard_normal((2, d_key)),
        **overrides,
    )
    instr = rt.Instruction.from_text("rotate the target surface", d_ctx, seed=0)
    return bank, params, instr


class TestLanguagePrior:
    def test_identical_keys_give_uniform(self):
        bank, params, instr = make_setup()
        bank.keys[:] = bank.keys[0]
        prior = rt.language_prior(bank, params, instr)
        np.testing.assert_allclose(prior, 0.25, atol=1e-12)

    def test_high_temperature_flattens(self):
        bank, params, instr = make_setup(t_lang=1e6)
        prior = rt.language_prior(bank, params, instr)
        np.testing.assert_allclose(prior, 0.25, atol=1e-6)

    def test_matches_direct_formula(self):
        bank, params, instr = make_setup()
        ctx = nx.rmsnorm(params.r_ctx @ instr.embedding, params.eps)
        expected = nx.softmax(np.array([
            ctx @ nx.rmsnorm(k, params.eps) for k in bank.keys
        ]) / (np.sqrt(bank.d_key) * params.t_lang))
        np.testing.assert_allclose(rt.language_prior(bank, params, instr), expected, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        bank, params, _ = make_setup()
        bad = rt.Instruction(text="x", embedding=np.ones(3))
        with pytest.raises(ValueError):
            rt.language_prior(bank, params, bad)


class TestStateLogits:
    def test_zero_query_gives_zero_logits(self):
        bank, params, _ = make_setup()
        np.testing.assert_array_equal(rt.state_logits(bank, params, np.zeros(bank.d_key)), 0.0)

    def test_aligned_key_saturates_to_sqrt_dk(self):
        bank, params, _ = make_setup(eps=1e-15)
        q = np.random.default_rng(3).standard_normal(bank.d_key)
        bank.keys[0] = q / np.linalg.norm(q)
        for m in range(1, bank.size):
            k = np.random.default_rng(4 + m).standard_normal(bank.d_key)
            k -= (k @ q) * q / (q @ q)
            bank.keys[m] = k
        zeta = rt.state_logits(bank, params, q)
        assert zeta[0] == pytest.approx(np.sqrt(bank.d_key) / params.t_attn, rel=1e-9)
        np.testing.assert_allclose(zeta[1:], 0.0, atol=1e-9)

    def test_doubling_temperature_halves_logits(self):
        bank, params, _ = make_setup()
        q = np.random.default_rng(5).standard_normal(bank.d_key)
        z1 = rt.state_logits(bank, params, q)
        bank2, params2, _ = make_setup(t_attn=2.0)
        z2 = rt.state_logits(bank2, params2, q)
        np.testing.assert_allclose(z2, z1 / 2.0, atol=1e-14)


class TestFuseLogits:
    def test_tau_zero_is_identity(self):
        zeta = np.array([0.3, -1.0, 2.0])
        np.testing.assert_array_equal(rt.fuse_logits(zeta, np.array([1.0, 0.0, 0.0]), 0.0), zeta)

    def test_uniform_prior_shifts_by_constant(self):
        zeta = np.array([0.3, -1.0, 2.0])
        fused = rt.fuse_logits(zeta, np.full(3, 1 / 3), 1.7)
        np.testing.assert_allclose(fused - zeta, 1.7 * np.log(1 / 3), atol=1e-12)
        np.testing.assert_array_equal(nx.topk_softmax(fused, 2)[1], nx.topk_softmax(zeta, 2)[1])

    def test_zero_prior_with_positive_tau_rejected(self):
        with pytest.raises(ValueError, match="prior support"):
            rt.fuse_logits(np.zeros(2), np.array([1.0, 0.0]), 0.5)

    def test_fused_equals_raw_logit_fusion_up_to_shift(self):
        # Routing from zeta + tau*log p equals routing from zeta + tau*rho.
        bank, params, instr = make_setup(tau_lang=0.8, k_active=2)
        q = np.random.default_rng(6).standard_normal(bank.d_key)
        zeta = rt.state_logits(bank, params, q)
        rho = rt.language_logits(bank, params, instr)
        fused = rt.fuse_logits(zeta, nx.softmax(rho), 0.8)
        raw = zeta + 0.8 * rho
        diff = fused - raw
        np.testing.assert_allclose(diff, diff[0], atol=1e-12)
        np.testing.assert_allclose(nx.topk_softmax(fused, 2)[1], nx.topk_softmax(raw, 2)[1],
                                   atol=1e-12)


class TestRoute:
    def test_single_atom_routes_everything_to_it(self):
        bank, params, instr = make_setup(m=1, k_active=1, tau_lang=0.5, lambda_ctx=0.3)
        q = np.random.default_rng(7).standard_normal(bank.d_key)
        res = rt.route(bank, params, q, instr)
        np.testing.assert_array_equal(res.alpha, [1.0])
        np.testing.assert_array_equal(res.operator, bank.atoms[0])

    def test_no_language_terms_equals_instruction_free(self):
        bank, params, instr = make_setup(tau_lang=0.0, lambda_ctx=0.0, k_active=2)
        q = np.random.default_rng(8).standard_normal(bank.d_key)
        with_instr = rt.route(bank, params, q, instr)
        without = rt.route(bank, params, q, None)
        np.testing.assert_array_equal(with_instr.alpha, without.alpha)
        np.testing.assert_array_equal(with_instr.operator, without.operator)

    def test_huge_tau_collapses_to_prior_argmax_atom(self):
        bank, params, instr = make_setup(tau_lang=1e4, k_active=2)
        q = np.random.default_rng(9).standard_normal(bank.d_key)
        res = rt.route(bank, params, q, instr)
        m_dagger = int(np.argmax(res.rho))
        assert res.alpha[m_dagger] >= 1.0 - 1e-6
        max_norm = bank.max_operator_norm()
        assert np.linalg.norm(res.operator - bank.atoms[m_dagger], 2) <= 1e-6 * max_norm

    def test_result_invariants(self):
        bank, params, instr = make_setup(tau_lang=0.7, k_active=3)
        q = np.random.default_rng(10).standard_normal(bank.d_key)
        res = rt.route(bank, params, q, instr)
        res.check(bank)
        assert res.active_set.size == 3

    def test_convex_hull_norm_bound(self):
        bank, params, instr = make_setup(tau_lang=0.4, k_active=2)
        rng = np.random.default_rng(11)
        max_norm = bank.max_operator_norm()
        for _ in range(200):
            res = rt.route(bank, params, rng.standard_normal(bank.d_key), instr)
            assert nx.spectral_norm(res.operator) <= max_norm + 1e-9


class TestTemperedPrior:
    def test_tau_one_is_identity(self):
        p = np.array([0.7, 0.2, 0.1])
        np.testing.assert_allclose(rt.tempered_prior(p, 1.0), p, atol=1e-15)

    def test_tau_zero_is_uniform(self):
        np.testing.assert_allclose(rt.tempered_prior(np.array([0.9, 0.1]), 0.0), 0.5)

    def test_derived_value(self):
        out = rt.tempered_prior(np.array([0.8, 0.2]), 2.0)
        np.testing.assert_allclose(out, [0.64 / 0.68, 0.04 / 0.68])
        np.testing.assert_allclose(out, [0.9412, 0.0588], atol=5e-5)


class TestVariationalOracle:
    def test_uniform_prior_reduces_to_softmax(self):
        zeta = np.array([0.5, -0.2, 1.3])
        out = rt.variational_oracle(zeta, np.full(3, 1 / 3), 0.0)
        np.testing.assert_allclose(out, nx.softmax(zeta), atol=1e-8)

    def test_zero_state_logits_recover_tempered_prior(self):
        prior = np.array([0.5, 0.3, 0.2])
        out = rt.variational_oracle(np.zeros(3), prior, 1.7)
        np.testing.assert_allclose(out, rt.tempered_prior(prior, 1.7), atol=1e-8)

    def test_agrees_with_closed_form_router(self):
        rng = np.random.default_rng(12)
        for trial in range(25):
            size = int(rng.integers(2, 6))
            zeta = rng.standard_normal(size)
            prior = nx.softmax(rng.standard_normal(size))
            tau = float(rng.uniform(0.0, 4.0))
            closed = nx.softmax(zeta + tau * np.log(prior))
            oracle = rt.variational_oracle(zeta, prior, tau)
            assert np.max(np.abs(closed - oracle)) < 1e-6

    def test_oracle_beats_random_simplex_points(self):
        rng = np.random.default_rng(13)
        zeta = rng.standard_normal(4)
        prior = nx.softmax(rng.standard_normal(4))
        pi = rt.tempered_prior(prior, 1.2)
        star = rt.variational_oracle(zeta, prior, 1.2)
        best = rt.variational_objective(star, zeta, pi)
        for _ in range(100):
            a = rng.dirichlet(np.ones(4))
            assert rt.variational_objective(a, zeta, pi) <= best + 1e-9


class TestTradeoffGap:
    def _route(self, tau, seed=14, k=3):
        bank, params, instr = make_setup(tau_lang=tau, k_active=k, seed=seed)
        q = np.random.default_rng(seed).standard_normal(bank.d_key)
        return rt.route(bank, params, q, instr)

    def test_uniform_tempered_prior_bound_is_log_k(self):
        res = self._route(tau=0.0)
        _, bound = rt.tradeoff_gap(res)
        assert bound == pytest.approx(np.log(3))

    def test_vertex_routing_has_zero_gap(self):
        bank, params, instr = make_setup(k_active=1)
        res = rt.route(bank, params, np.random.default_rng(15).standard_normal(bank.d_key), instr)
        gap, _ = rt.tradeoff_gap(res)
        assert gap == pytest.approx(0.0, abs=1e-12)

    def test_monte_carlo_inequality(self):
        rng = np.random.default_rng(16)
        for trial in range(200):
            tau = float(rng.uniform(0, 3))
            res = self._route(tau=tau, seed=int(rng.integers(1, 10000)), k=int(rng.integers(1, 4)))
            gap, bound = rt.tradeoff_gap(res)  # raises on violation
            assert 0.0 <= gap + 1e-12
            assert gap <= bound + 1e-9


class TestOracleConvergence:
    def test_nonconvergence_raises_with_gap(self):
        with pytest.raises(RuntimeError, match="did not converge"):
            rt.variational_oracle(np.array([0.0, 1.0]), np.array([0.5, 0.5]), 1.0,
                                  step=0.5, max_iter=2)
