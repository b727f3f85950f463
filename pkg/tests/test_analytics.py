"""Routing analytics: usage rows, entropy, symmetric KL, drift, profiles."""

import numpy as np
import pytest

from rankmem import analytics as an
from rankmem import benchmarks as bm
from rankmem import numerics as nx
from rankmem.model import Model, ModelConfig, forward
from rankmem.training import RunReport, TrainSchedule


def toy_traces(seed=0, n_traces=3, batch=4):
    cfg = ModelConfig(depth=4, width=8, rank=3, atoms=4, k_active=2, blocks=2,
                      d_key=6, d_ctx=6)
    model = Model(cfg, seed)
    rng = np.random.default_rng(seed + 50)
    for i in range(cfg.depth):
        model.store[f"b{i}"][...] = rng.standard_normal(model.store[f"b{i}"].shape)
    model.backbone.freeze()
    traces = []
    for t in range(n_traces):
        _, trace = forward(model, rng.standard_normal((batch, 2)))
        traces.append(trace)
    return traces


class TestAtomUsage:
    def test_single_trace_single_block_returns_block_mean(self):
        cfg = ModelConfig(depth=2, width=8, rank=3, atoms=4, k_active=2, blocks=1,
                          d_key=6, d_ctx=6)
        model = Model(cfg, 1)
        model.backbone.freeze()
        _, trace = forward(model, np.random.default_rng(2).standard_normal((5, 2)))
        usage = an.atom_usage([trace])
        np.testing.assert_allclose(usage, trace.blocks[0].alpha.mean(axis=0), atol=1e-15)

    def test_usage_is_simplex(self):
        usage = an.atom_usage(toy_traces())
        nx.check_simplex(usage, tol=1e-9)

    def test_two_vertex_traces_average(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0]])
        mat = an.UsageMatrix(labels=["a", "b"], rows=rows)
        np.testing.assert_allclose(mat.rows.mean(axis=0), [0.5, 0.5])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            an.atom_usage([])


class TestUsageEntropy:
    def test_uniform_column_hits_log_tasks(self):
        rows = np.array([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
        ent, flagged = an.usage_entropy(an.UsageMatrix(labels=list("abc"), rows=rows))
        np.testing.assert_allclose(ent, np.log(3))
        assert not any(flagged)

    def test_single_task_column_is_zero(self):
        rows = np.array([[1.0, 0.0], [1.0, 0.0]])
        ent, flagged = an.usage_entropy(an.UsageMatrix(labels=["a", "b"], rows=rows))
        assert ent[0] == pytest.approx(0.0)
        assert flagged[1] and ent[1] == 0.0  # zero column flagged

    def test_hand_value(self):
        rows = np.array([[0.75, 0.25], [0.25, 0.75]])
        ent, _ = an.usage_entropy(an.UsageMatrix(labels=["a", "b"], rows=rows))
        expected = -(0.75 * np.log(0.75) + 0.25 * np.log(0.25))
        assert ent[0] == pytest.approx(expected)
        assert ent[0] == pytest.approx(0.5623, abs=2e-4)

    def test_needs_two_tasks(self):
        with pytest.raises(ValueError):
            an.usage_entropy(an.UsageMatrix(labels=["a"], rows=np.array([[1.0]])))


class TestSymmetricKl:
    def test_identical_rows_zero(self):
        rows = np.array([[0.5, 0.5], [0.5, 0.5]])
        kl = an.symmetric_kl(an.UsageMatrix(labels=["a", "b"], rows=rows))
        np.testing.assert_allclose(kl, 0.0, atol=1e-12)

    def test_symmetry_and_zero_diagonal(self):
        rng = np.random.default_rng(3)
        rows = np.stack([nx.softmax(rng.standard_normal(5)) for _ in range(4)])
        kl = an.symmetric_kl(an.UsageMatrix(labels=list("abcd"), rows=rows))
        np.testing.assert_array_equal(kl, kl.T)
        np.testing.assert_array_equal(np.diag(kl), 0.0)
        assert np.all(kl >= 0.0)

    def test_hand_value(self):
        a = np.array([0.75, 0.25])
        b = np.array([0.25, 0.75])
        kl = an.symmetric_kl(an.UsageMatrix(labels=["a", "b"], rows=np.stack([a, b])))
        sa, sb = a + an.KL_SMOOTHING, b + an.KL_SMOOTHING
        sa, sb = sa / sa.sum(), sb / sb.sum()
        expected = 0.5 * (nx.kl_div(sa, sb) + nx.kl_div(sb, sa))
        assert kl[0, 1] == pytest.approx(expected, rel=1e-12)

    def test_topk_zeros_are_smoothed(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0]])
        kl = an.symmetric_kl(an.UsageMatrix(labels=["a", "b"], rows=rows))
        assert np.isfinite(kl).all()


class TestRouteDrift:
    def test_identical_stages_zero_drift(self):
        usage = np.tile(np.array([[0.6, 0.4]]），(3, 1, 1)) if False else \
            np.broadcast_to(np.array([[0.6, 0.4]]), (3, 1, 2)).copy()
        record = an.DriftRecord(stage_labels=list("xyz"), task_labels=["t"],
                                usage=usage)
        drift = an.route_drift(record)
        np.testing.assert_allclose(drift, 0.0, atol=1e-12)

    def test_single_stage_empty_matrix(self):
        record = an.DriftRecord(stage_labels=["only"], task_labels=["t"],
                                usage=np.array([[[1.0, 0.0]]]))
        assert an.route_drift(record).shape == (0, 1)


class TestGradProfile:
    def _report(self, norms):
        return RunReport(config={}, method="queryable", seed=0,
                         post={"layer_grad_norms": norms, "train_mse": [1.0],
                               "test_mse": [1.0], "eval_epochs": [0],
                               "grad_concentration": [], "route_entropy": [],
                               "diverged": False, "epochs_run": 1})

    def test_uniform_norms_give_index_one(self):
        _, conc = an.grad_profile(self._report([[2.0, 2.0, 2.0]]))
        np.testing.assert_allclose(conc, 1.0)

    def test_single_dominant_layer_limit(self):
        _, conc = an.grad_profile(self._report([[5.0, 0.0, 0.0, 0.0, 0.0]]))
        assert conc[0] == pytest.approx(5.0)  # max / mean = L in the limit

    def test_recomputes_from_raw_norms(self):
        rng = np.random.default_rng(4)
        raw = rng.uniform(0.1, 3.0, (6, 8)).tolist()
        norms, conc = an.grad_profile(self._report(raw))
        np.testing.assert_array_equal(norms, np.asarray(raw))
        np.testing.assert_allclose(conc, norms.max(axis=1) / norms.mean(axis=1))


def drift_pcfg():
    model = ModelConfig(depth=4, width=8, rank=3, atoms=4, k_active=2, blocks=2,
                        d_key=6, d_ctx=6, tau_lang=0.4, lambda_ctx=0.4)
    schedule = TrainSchedule(pre_epochs=4, post_epochs=5, batch_size=16,
                             eval_every=5, pre_lr=3e-3, post_lr=1e-3)
    return bm.ProtocolConfig(model=model, schedule=schedule, n_source=64,
                             n_target=48, n_adapt=24)


class TestSequentialProtocol:
    def test_single_task_record(self):
        record, metrics = an.sequential_protocol(
            drift_pcfg(), [an.SequentialTask("t0", "matyas", 0, "fit matyas")], seed=0)
        assert record.usage.shape[0] == 1
        assert an.route_drift(record).shape == (0, 1)
        assert len(metrics) == 1

    def test_usage_rows_are_simplexes(self):
        tasks = [an.SequentialTask("t0", "matyas", 0, "a"),
                 an.SequentialTask("t1", "sincos", 1, "b")]
        record, _ = an.sequential_protocol(drift_pcfg(), tasks, seed=1)
        for stage in range(record.usage.shape[0]):
            for t in range(record.usage.shape[1]):
                nx.check_simplex(record.usage[stage, t], tol=1e-9)
