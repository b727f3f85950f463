"""Backend parity: the compiled kernels must reproduce the numpy reference,
and the activation derivative must match finite differences of the value."""

import numpy as np
import pytest

from rankmem.kernels import BACKEND, reference

from helpers import assert_close, finite_difference

try:
    from rankmem.kernels import _core
except ImportError:
    _core = None

needs_core = pytest.mark.skipif(_core is None, reason="compiled backend not built")


def _random_stack(seed=0, batch=5, width=6, rank=3, layers=4):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((batch, width))
    w = rng.standard_normal((layers, width, width)) / np.sqrt(width)
    wt = np.ascontiguousarray(w.transpose(0, 2, 1))
    bias = 0.1 * rng.standard_normal((layers, width))
    a = rng.standard_normal((layers, rank, width)) / np.sqrt(width)
    at = np.ascontiguousarray(a.transpose(0, 2, 1))
    bm = rng.standard_normal((layers, width, rank)) / np.sqrt(rank)
    bmt = np.ascontiguousarray(bm.transpose(0, 2, 1))
    g = rng.uniform(0.05, 0.8, layers)
    s_op = rng.standard_normal((batch, rank, rank)) / np.sqrt(rank)
    d_out = rng.standard_normal((batch, width))
    ds_extra = 0.05 * rng.standard_normal((batch, rank))
    return h, w, wt, bias, a, at, bm, bmt, g, s_op, d_out, ds_extra


def test_activation_grad_matches_finite_differences():
    ys = np.linspace(-4.0, 4.0, 41)
    for y in ys:
        _, sig = reference.gelu(np.array([[y]]))
        grad = reference.gelu_grad(np.array([[y]]), sig)[0, 0]
        num = finite_difference(lambda v: reference.gelu(v.reshape(1, 1))[0][0, 0],
                                np.array([y]))[0]
        assert grad == pytest.approx(num, rel=1e-6, abs=1e-9)


def test_activation_is_gelu_shaped():
    act, _ = reference.gelu(np.array([[0.0, 10.0, -10.0]]))
    assert act[0, 0] == 0.0
    assert act[0, 1] == pytest.approx(10.0, abs=1e-12)
    assert abs(act[0, 2]) < 1e-12


@needs_core
def test_gelu_parity():
    y = np.random.default_rng(0).standard_normal((4, 9)) * 3
    act_r, sig_r = reference.gelu(y)
    act_c, sig_c = _core.gelu(y)
    assert_close(act_c, act_r, rel=1e-12, abs_=1e-14, msg="gelu")
    assert_close(sig_c, sig_r, rel=1e-12, abs_=1e-14, msg="gelu sig")
    assert_close(_core.gelu_grad(y, sig_c), reference.gelu_grad(y, sig_r),
                 rel=1e-12, abs_=1e-14, msg="gelu grad")


@needs_core
def test_mlp_stack_parity():
    h, w, wt, bias, *_ = _random_stack()
    acts_r, pre_r, sig_r = reference.mlp_stack_forward(h, wt, bias)
    acts_c, pre_c, sig_c = _core.mlp_stack_forward(h, wt, bias)
    assert_close(acts_c, acts_r, rel=1e-12, abs_=1e-13, msg="acts")
    assert_close(pre_c, pre_r, rel=1e-12, abs_=1e-13, msg="preacts")

    d_out = np.random.default_rng(1).standard_normal(h.shape)
    dh_r, dw_r, db_r = reference.mlp_stack_backward(d_out, acts_r, pre_r, sig_r, w)
    dh_c, dw_c, db_c = _core.mlp_stack_backward(d_out, acts_c, pre_c, sig_c, w)
    assert_close(dh_c, dh_r, rel=1e-11, abs_=1e-12, msg="dh")
    assert_close(dw_c, dw_r, rel=1e-11, abs_=1e-12, msg="dw")
    assert_close(db_c, db_r, rel=1e-11, abs_=1e-12, msg="dbias")


@needs_core
def test_adapter_block_parity():
    h, w, wt, bias, a, at, bm, bmt, g, s_op, d_out, ds_extra = _random_stack(seed=2)
    out_r = reference.adapter_block_forward(h, wt, bias, at, bmt, g, s_op, 2.0)
    out_c = _core.adapter_block_forward(h, wt, bias, at, bmt, g, s_op, 2.0)
    for x_c, x_r, name in zip(out_c, out_r, "acts pre sig s d t".split()):
        assert_close(x_c, x_r, rel=1e-12, abs_=1e-13, msg=name)

    acts, pre, sig, s_st, d_st, t_st = out_r
    back_r = reference.adapter_block_backward(d_out, acts, pre, sig, s_st, d_st, t_st,
                                              w, a, bm, g, s_op, 2.0, ds_extra)
    back_c = _core.adapter_block_backward(d_out, acts, pre, sig, s_st, d_st, t_st,
                                          w, a, bm, g, s_op, 2.0, ds_extra)
    for x_c, x_r, name in zip(back_c, back_r, "dh da dbm gate dsop r".split()):
        assert_close(x_c, x_r, rel=1e-10, abs_=1e-11, msg=name)


def test_backend_reports_a_name():
    assert BACKEND in ("c", "reference")
