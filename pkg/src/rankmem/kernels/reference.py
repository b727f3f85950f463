"""Pure-numpy reference implementation of the hot-loop kernels.

This is the authoritative semantics; the compiled backend in ``_core.pyx``
mirrors these functions exactly and is tested against them.  Shapes:

* ``h``          (batch, width)      activations entering a layer stack
* ``wt``         (n, width, width)   frozen weights, input-major (W^T per layer)
* ``w``          (n, width, width)   frozen weights, output-major (canonical)
* ``bias``       (n, width)
* ``at``         (n, width, rank)    down-projections, input-major (A^T)
* ``a``          (n, rank, width)    down-projections, canonical
* ``bm, bmt``    (n, width, rank) / (n, rank, width)  up-projections
* ``g``          (n,)                per-layer gate values in [0, 1)
* ``s_op``       (batch, rank, rank) per-example routed operator
* ``scale``      adapter output scaling alpha_L / rank

Forward kernels take the input-major layouts so the inner loops of the
compiled twin stream contiguously; backward kernels take the canonical
layouts for the same reason.  Gradients are returned canonical.

The activation is the tanh-form GELU written through the logistic
function: act(y) = y * sigmoid(2 * c1 * (y + c2 * y^3)).  Forward caches
the sigmoid so backward needs no transcendentals.
"""

from __future__ import annotations

import numpy as np

GELU_C1 = np.sqrt(2.0 / np.pi)
GELU_C2 = 0.044715


def gelu(y):
    """Activation value and its cached sigmoid: ``(act, sig)``."""
    u = 2.0 * GELU_C1 * (y + GELU_C2 * y * y * y)
    with np.errstate(over="ignore"):
        sig = 1.0 / (1.0 + np.exp(-u))
    return y * sig, sig


def gelu_grad(y, sig):
    """Derivative of the activation given the cached sigmoid."""
    return sig + y * sig * (1.0 - sig) * 2.0 * GELU_C1 * (1.0 + 3.0 * GELU_C2 * y * y)


def mlp_stack_forward(h, wt, bias):
    """Forward through n uniform GELU layers.

    Returns ``(acts, preacts, sig)`` with ``acts[0] = h`` and
    ``acts[i+1] = act(acts[i] @ wt[i] + bias[i])``.
    """
    n, batch, width = wt.shape[0], h.shape[0], h.shape[1]
    acts = np.empty((n + 1, batch, width))
    preacts = np.empty((n, batch, width))
    sig = np.empty((n, batch, width))
    acts[0] = h
    for i in range(n):
        preacts[i] = acts[i] @ wt[i] + bias[i]
        acts[i + 1], sig[i] = gelu(preacts[i])
    return acts, preacts, sig


def mlp_stack_backward(d_out, acts, preacts, sig, w):
    """Backward for ``mlp_stack_forward``: returns ``(d_in, dw, dbias)``."""
    n = w.shape[0]
    dw = np.empty_like(w)
    dbias = np.empty((n, w.shape[1]))
    dh = d_out
    for i in range(n - 1, -1, -1):
        dpre = dh * gelu_grad(preacts[i], sig[i])
        dw[i] = dpre.T @ acts[i]
        dbias[i] = dpre.sum(axis=0)
        dh = dpre @ w[i]
    return dh, dw, dbias


def adapter_block_forward(h, wt, bias, at, bmt, g, s_op, scale):
    """Forward through the interior layers of one routed block.

    Per layer: ``s = x A^T``, ``d = S s``, ``t = s + g d``,
    ``y = x W^T + bias + scale * t B^T``, ``x' = act(y)``.

    Returns ``(acts, preacts, sig, s_st, d_st, t_st)`` where the ``*_st``
    arrays stack the per-layer rank-space states, shape (n, batch, rank).
    """
    n, batch = wt.shape[0], h.shape[0]
    rank = at.shape[2]
    acts = np.empty((n + 1, batch, h.shape[1]))
    preacts = np.empty((n, batch, h.shape[1]))
    sig = np.empty((n, batch, h.shape[1]))
    s_st = np.empty((n, batch, rank))
    d_st = np.empty((n, batch, rank))
    t_st = np.empty((n, batch, rank))
    acts[0] = h
    for i in range(n):
        s = acts[i] @ at[i]
        d = np.einsum("brs,bs->br", s_op, s)
        t = s + g[i] * d
        preacts[i] = acts[i] @ wt[i] + bias[i] + scale * (t @ bmt[i])
        acts[i + 1], sig[i] = gelu(preacts[i])
        s_st[i], d_st[i], t_st[i] = s, d, t
    return acts, preacts, sig, s_st, d_st, t_st


def adapter_block_backward(d_out, acts, preacts, sig, s_st, d_st, t_st, w, a, bm, g,
                           s_op, scale, ds_extra):
    """Backward for ``adapter_block_forward`` with a frozen backbone.

    ``ds_extra`` (batch, rank) is an external gradient added to every
    layer's rank state (the block-mean path from later blocks' routing).

    Returns ``(d_in, da, dbm, gate_dot, d_s_op, r_st)``:

    * ``gate_dot[i]`` is sum over the batch of <r_i, d_i> (the gate gradient
      before the sigmoid-derivative factor),
    * ``d_s_op`` (batch, rank, rank) accumulates g_i * r_i s_i^T,
    * ``r_st`` stacks the per-layer loss gradients w.r.t. t.
    """
    n = w.shape[0]
    da = np.empty_like(a)
    dbm = np.empty_like(bm)
    gate_dot = np.empty(n)
    r_st = np.empty_like(s_st)
    d_s_op = np.zeros_like(s_op)
    dh = d_out
    for i in range(n - 1, -1, -1):
        dpre = dh * gelu_grad(preacts[i], sig[i])
        dbm[i] = scale * (dpre.T @ t_st[i])
        r = scale * (dpre @ bm[i])
        r_st[i] = r
        gate_dot[i] = float(np.einsum("br,br->", r, d_st[i]))
        d_s_op += g[i] * np.einsum("bi,bj->bij", r, s_st[i])
        ds = r + g[i] * np.einsum("bsj,bs->bj", s_op, r) + ds_extra
        da[i] = ds.T @ acts[i]
        dh = dpre @ w[i] + ds @ a[i]
    return dh, da, dbm, gate_dot, d_s_op, r_st
