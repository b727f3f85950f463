"""Block partitions, depth summaries, and query construction."""

import numpy as np
import pytest

from rankmem import depth as dp
from rankmem import numerics as nx
from rankmem.router import Instruction, RouterParams


def make_params(d_key=5, rank=3, d_ctx=4, seed=0, **overrides):
    rng = np.random.default_rng(seed)
    return RouterParams(
        q_cur=rng.standard_normal((d_key, rank)),
        q_dep=rng.standard_normal((d_key, rank)),
        q_ctx=rng.standard_normal((d_key, d_ctx)),
        r_ctx=rng.standard_normal((d_key, d_ctx)),
        q_dep_q=rng.standard_normal((d_key, d_key)),
        q_dep_k=rng.standard_normal((d_key, rank)),
        layer_priors=rng.standard_normal((3, d_key)),
        **overrides,
    )


class TestBlockPartition:
    def test_equal_partition_with_remainder(self):
        part = dp.BlockPartition.equal(10, 4)
        assert [list(b) for b in part] == [[0, 1], [2, 3], [4, 5], [6, 7, 8, 9]]

    def test_exact_split(self):
        part = dp.BlockPartition.equal(8, 4)
        assert all(len(b) == 2 for b in part)

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            dp.BlockPartition.equal(3, 4)

    def test_non_contiguous_rejected(self):
        with pytest.raises(ValueError):
            dp.BlockPartition((range(0, 2), range(3, 5)))


class TestBlockMean:
    def test_single_state(self):
        v = np.array([1.0, 2.0])
        np.testing.assert_array_equal(dp.block_mean([v]), v)

    def test_cancellation(self):
        v = np.array([1.0, -2.0])
        np.testing.assert_array_equal(dp.block_mean([v, -v]), np.zeros(2))

    def test_three_vectors_hand_checked(self):
        states = [np.array([1.0, 0.0]), np.array([0.0, 3.0]), np.array([2.0, 3.0])]
        np.testing.assert_allclose(dp.block_mean(states), [1.0, 2.0])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dp.block_mean([])


class TestDepthLogits:
    def test_identical_summaries_give_uniform_weights(self):
        params = make_params()
        ctx = dp.DepthContext([np.array([1.0, 2.0, 3.0])] * 3)
        q0 = np.random.default_rng(1).standard_normal(5)
        xi = dp.depth_logits(params, q0, ctx)
        np.testing.assert_allclose(xi, xi[0], atol=1e-14)
        u = dp.depth_summary(params, q0, ctx)
        np.testing.assert_allclose(u, ctx.summaries[0], atol=1e-12)

    def test_doubling_temperature_halves_logits(self):
        ctx = dp.DepthContext([np.array([1.0, 0.0, -1.0]), np.array([0.5, 2.0, 0.1])])
        q0 = np.random.default_rng(2).standard_normal(5)
        x1 = dp.depth_logits(make_params(t_dep=1.0), q0, ctx)
        x2 = dp.depth_logits(make_params(t_dep=2.0), q0, ctx)
        np.testing.assert_allclose(x2, x1 / 2.0, atol=1e-14)

    def test_matches_closed_form(self):
        params = make_params()
        s1, s2 = np.array([1.0, 0.2, -0.3]), np.array([0.0, 1.5, 0.7])
        ctx = dp.DepthContext([s1, s2])
        q0 = np.array([0.3, -1.2, 0.4, 2.0, -0.6])
        qhat = nx.rmsnorm(params.q_dep_q @ q0, params.eps)
        expected = np.array([
            qhat @ nx.rmsnorm(params.q_dep_k @ s1, params.eps),
            qhat @ nx.rmsnorm(params.q_dep_k @ s2, params.eps),
        ]) / (np.sqrt(5) * params.t_dep)
        np.testing.assert_allclose(dp.depth_logits(params, q0, ctx), expected, atol=1e-12)

    def test_empty_context_rejected(self):
        with pytest.raises(ValueError):
            dp.depth_logits(make_params(), np.zeros(5), dp.DepthContext())


class TestDepthSummary:
    def test_first_block_convention_is_zero(self):
        u = dp.depth_summary(make_params(), np.ones(5), dp.DepthContext())
        np.testing.assert_array_equal(u, np.zeros(3))

    def test_single_completed_block_returned_exactly(self):
        s1 = np.array([0.4, -1.0, 2.0])
        u = dp.depth_summary(make_params(), np.ones(5), dp.DepthContext([s1]))
        np.testing.assert_allclose(u, s1, atol=1e-14)

    def test_hull_bound_monte_carlo(self):
        rng = np.random.default_rng(3)
        params = make_params()
        for _ in range(1000):
            n = int(rng.integers(1, 5))
            summaries = [rng.standard_normal(3) * rng.uniform(0.1, 3) for _ in range(n)]
            q0 = rng.standard_normal(5)
            u = dp.depth_summary(params, q0, dp.DepthContext(summaries))
            assert np.linalg.norm(u) <= max(np.linalg.norm(s) for s in summaries) + 1e-9

    def test_weights_form_simplex(self):
        params = make_params()
        ctx_rows = [np.array([[0.5, 1.0, 0.0]]), np.array([[2.0, -1.0, 0.3]])]
        _, beta = dp.depth_summary_rows(params, np.ones((1, 5)), ctx_rows)
        nx.check_simplex(beta[0], tol=1e-9)


class TestBuildQuery:
    def test_first_block_no_instruction_reduction(self):
        params = make_params(lambda_ctx=0.0)
        w = np.arange(5.0)
        s_entry = np.array([1.0, -1.0, 0.5])
        q = dp.build_query(params, w, s_entry, None, dp.DepthContext())
        np.testing.assert_allclose(q, w + params.q_cur @ s_entry, atol=1e-14)

    def test_all_zero_inputs_give_prior(self):
        params = make_params()
        w = np.arange(5.0)
        q = dp.build_query(params, w, np.zeros(3), None, dp.DepthContext())
        np.testing.assert_array_equal(q, w)

    def test_instruction_term_enters_prequery(self):
        params = make_params(lambda_ctx=0.7)
        instr = Instruction.from_text("probe", 4, seed=0)
        w = np.zeros(5)
        q = dp.build_query(params, w, np.zeros(3), instr, dp.DepthContext())
        np.testing.assert_allclose(q, 0.7 * params.q_ctx @ instr.embedding, atol=1e-14)

    def test_query_norm_bound_monte_carlo(self):
        rng = np.random.default_rng(4)
        params = make_params(lambda_ctx=0.6)
        instr = Instruction.from_text("bound probe", 4, seed=1)
        norm_cur = nx.spectral_norm(params.q_cur)
        norm_ctx = nx.spectral_norm(params.q_ctx)
        norm_dep = nx.spectral_norm(params.q_dep)
        for _ in range(1000):
            w = rng.standard_normal(5)
            s_entry = rng.standard_normal(3)
            summaries = [rng.standard_normal(3) for _ in range(int(rng.integers(0, 4)))]
            q = dp.build_query(params, w, s_entry, instr, dp.DepthContext(summaries))
            r_s = max([np.linalg.norm(s_entry)] + [np.linalg.norm(s) for s in summaries])
            r_e = np.linalg.norm(instr.embedding)
            bound = (np.linalg.norm(w) + norm_cur * r_s
                     + params.lambda_ctx * norm_ctx * r_e + norm_dep * r_s)
            assert np.linalg.norm(q) <= bound + 1e-9
