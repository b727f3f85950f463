"""Hot-loop kernel backend selection.

Two interchangeable backends implement the layer-stack kernels:

* ``_core`` — Cython extension compiled at install time (preferred),
* ``reference`` — pure numpy, always available.

Selection happens once at import.  Set ``RANKMEM_KERNELS=reference`` (or
``c``) to force a backend; the default ``auto`` takes the extension when it
imported cleanly.  ``python -m rankmem.kernels.bench`` compares both.
"""

from __future__ import annotations

import importlib
import os

import numpy as np

from . import reference
from .reference import GELU_C1, GELU_C2

_choice = os.environ.get("RANKMEM_KERNELS", "auto").lower()
_core = None
if _choice in ("auto", "c", "cython"):
    try:
        _core = importlib.import_module("rankmem.kernels._core")
    except ImportError:
        _core = None
        if _choice != "auto":
            raise ImportError(
                "RANKMEM_KERNELS requested the compiled backend but "
                "rankmem.kernels._core is not built"
            )
elif _choice not in ("reference", "py", "python"):
    raise ValueError(f"unknown RANKMEM_KERNELS value: {_choice!r}")

_impl = _core if _core is not None else reference

BACKEND = "c" if _core is not None else "reference"


def backend_name() -> str:
    return BACKEND


def _c(x):
    return np.ascontiguousarray(x, dtype=np.float64)


if _impl is reference:
    gelu = reference.gelu
    gelu_grad = reference.gelu_grad
    mlp_stack_forward = reference.mlp_stack_forward
    mlp_stack_backward = reference.mlp_stack_backward
    adapter_block_forward = reference.adapter_block_forward
    adapter_block_backward = reference.adapter_block_backward
else:

    def gelu(y):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            act, sig = _impl.gelu(_c(y[None, :]))
            return act[0], sig[0]
        return _impl.gelu(_c(y))

    def gelu_grad(y, sig):
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            return _impl.gelu_grad(_c(y[None, :]), _c(sig[None, :]))[0]
        return _impl.gelu_grad(_c(y), _c(sig))

    def mlp_stack_forward(h, wt, bias):
        return _impl.mlp_stack_forward(_c(h), _c(wt), _c(bias))

    def mlp_stack_backward(d_out, acts, preacts, sig, w):
        return _impl.mlp_stack_backward(_c(d_out), _c(acts), _c(preacts), _c(sig), _c(w))

    def adapter_block_forward(h, wt, bias, at, bmt, g, s_op, scale):
        return _impl.adapter_block_forward(
            _c(h), _c(wt), _c(bias), _c(at), _c(bmt), _c(g), _c(s_op), float(scale)
        )

    def adapter_block_backward(d_out, acts, preacts, sig, s_st, d_st, t_st, w, a, bm,
                               g, s_op, scale, ds_extra):
        return _impl.adapter_block_backward(
            _c(d_out), _c(acts), _c(preacts), _c(sig), _c(s_st), _c(d_st), _c(t_st),
            _c(w), _c(a), _c(bm), _c(g), _c(s_op), float(scale), _c(ds_extra),
        )
