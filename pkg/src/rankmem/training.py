"""Loss, exact gradients, optimizer, and the two-stage training protocol.

The backward pass is hand-derived reverse mode.  The rank-space segments
(routed operator, atoms, logits, gates) use the closed-form identities:

* dL/dS_b       = sum over the block's layers of g_l r_l s_l^T
* dL/dC_m       = alpha_m dL/dS_b           (accumulated over blocks)
* dL/dlogit_m   = alpha_m (psi_m - psibar),  psi_m = <dL/dS, C_m>_F
* dL/deta_l     = g_l (1 - g_l) <r_l, d_l>

with r_l = dL/dt_l.  The active set is held fixed (straight-through
through top-k selection).  Everything else (query/key projections, depth
attention, RMS normalization chains, backbone activations) is propagated
explicitly; every path is certified against central finite differences in
the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from rankmem import adapter as ad
from rankmem import kernels, seeding
from rankmem.model import Backbone, ForwardTrace, Model, backbone_forward, forward
from rankmem.numerics import (entropy, rmsnorm_jvp_lastaxis, rmsnorm_jvp_rows,
                              rmsnorm_lastaxis, rmsnorm_rows)
from rankmem.router import AtomBank, Instruction, RouteResult

DIVERGENCE_THRESHOLD = 1e5


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / pred.size


# ---------------------------------------------------------------------------
# Closed-form gradient pieces (single-route views, used by the suite)
# ---------------------------------------------------------------------------


def grad_s_block(trace: ForwardTrace, block: int) -> np.ndarray:
    """Rank-space gradient sum g_l r_l s_l^T over the block, batch-summed.

    Requires a backward pass to have populated r states on the trace.
    """
    bt = trace.blocks[block]
    if bt.r_entry is None:
        raise ValueError("trace has no backward quantities; run a backward first")
    gates = bt.gates
    out = gates[0] * bt.r_entry.T @ bt.s_entry
    if bt.interior is not None:
        s_st = bt.interior[3]
        for j in range(s_st.shape[0]):
            out += gates[j + 1] * bt.r_interior[j].T @ s_st[j]
    return out


def grad_atoms(route: RouteResult, g_s: np.ndarray) -> np.ndarray:
    """Per-atom gradients alpha_m * dL/dS for one routing decision."""
    return route.alpha[:, None, None] * g_s[None, :, :]


def grad_logits(route: RouteResult, g_s: np.ndarray, bank: AtomBank):
    """(dzeta, drho): alpha_m (psi_m - psibar) and its tau-scaled twin."""
    psi = np.einsum("ij,mij->m", g_s, bank.atoms)
    psibar = float(route.alpha @ psi)
    dzeta = route.alpha * (psi - psibar)
    drho = route.tau_lang * dzeta
    return dzeta, drho


def grad_gate(trace: ForwardTrace, layer: int) -> float:
    """sigmoid'(eta) <r, d> for one adapted layer, batch-summed."""
    for bt in trace.blocks:
        if layer in bt.layers:
            pos = layer - bt.layers.start
            g = bt.gates[pos]
            if pos == 0:
                r, d = bt.r_entry, bt.d_entry
            else:
                r, d = bt.r_interior[pos - 1], bt.interior[4][pos - 1]
            if r is None:
                raise ValueError("trace has no backward quantities")
            return float(g * (1.0 - g) * np.sum(r * d))
    raise ValueError(f"layer {layer} not in any block")


def compressed_gradient(g_mat: np.ndarray, layer: ad.AdapterLayer) -> np.ndarray:
    """Rank-space compression B^T G A^T of a dense layer gradient."""
    g_mat = np.asarray(g_mat, dtype=np.float64)
    if g_mat.shape != (layer.b.shape[0], layer.a.shape[1]):
        raise ValueError("dense gradient shape mismatch")
    return layer.b.T @ g_mat @ layer.a.T


# ---------------------------------------------------------------------------
# Full backward
# ---------------------------------------------------------------------------


def loss_and_grad(model: Model, x: np.ndarray, y: np.ndarray,
                  instr: Instruction | None = None, train: bool = True,
                  dropout_rng: np.random.Generator | None = None):
    """Forward + backward; leaves gradients in ``model.store.grad``.

    Returns ``(loss, trace)``.  The frozen backbone receives no gradient
    entries by construction (its store is not touched).
    """
    pred, trace = forward(model, x, instr=instr, train=train, dropout_rng=dropout_rng)
    y2 = np.asarray(y, dtype=np.float64).reshape(trace.pred.shape)
    loss = mse_loss(trace.pred, y2)
    model.store.zero_grad()
    _backward_from_trace(model, trace, mse_grad(trace.pred, y2))
    model.store.check_finite_grad()
    return loss, trace


def backward(model: Model, x: np.ndarray, y: np.ndarray,
             instr: Instruction | None = None):
    """Gradient set for one batch: ``(loss, grads, trace)`` with grads keyed
    by parameter name."""
    loss, trace = loss_and_grad(model, x, y, instr=instr, train=False)
    grads = {name: model.store.grad_of(name).copy() for name in model.store.names}
    return loss, grads, trace


def _backward_from_trace(model: Model, trace: ForwardTrace, dpred: np.ndarray) -> None:
    cfg, store = model.cfg, model.store
    batch = trace.pred.shape[0]
    static = trace.static
    per_example = cfg.routing == "per_example"

    dh = dpred @ model.backbone.store["head_w"]

    n_blocks = len(trace.blocks)
    dsbar_acc = [np.zeros_like(bt.sbar) for bt in trace.blocks]
    if not static:
        keys = store["keys"]
        khat = rmsnorm_rows(keys, cfg.eps)
        dkhat_acc = np.zeros_like(keys)
        drho_acc = np.zeros(cfg.atoms)

    for bi in range(n_blocks - 1, -1, -1):
        bt = trace.blocks[bi]
        entry = bt.layers.start
        n_layers = len(bt.layers)
        interior_idx = list(bt.layers)[1:]

        if static:
            ds_extra = np.zeros((batch, cfg.rank))
        elif per_example:
            ds_extra = dsbar_acc[bi] / n_layers
        else:
            ds_extra = np.broadcast_to(dsbar_acc[bi] / (n_layers * batch),
                                       (batch, cfg.rank))
        ds_extra = np.ascontiguousarray(ds_extra)

        d_s_total = np.zeros((batch, cfg.rank, cfg.rank))
        if interior_idx:
            lo, hi = bt.layers.start, bt.layers.stop - 1  # rows of the rest-region
            w_stk, _, _ = model.backbone.interior_stacks(bt.layers)
            a_stk = model._a_rest[lo:hi]
            bm_stk = model._b_rest[lo:hi]
            g_vec = bt.gates[1:]
            if bt.interior_masks is not None:
                dh, da_int, dbm_int, gate_dots, d_s_k, r_int = _interior_backward_dropout(
                    dh, bt.interior, bt.interior_masks, w_stk, a_stk, bm_stk,
                    g_vec, bt.s_op_b, model.scale, ds_extra)
            else:
                acts, pre, sig, s_st, d_st, t_st = bt.interior
                dh, da_int, dbm_int, gate_dots, d_s_k, r_int = kernels.adapter_block_backward(
                    dh, acts, pre, sig, s_st, d_st, t_st, w_stk, a_stk, bm_stk,
                    g_vec, bt.s_op_b, model.scale, ds_extra)
            bt.r_interior = r_int
            d_s_total += d_s_k
            model._a_rest_grad[lo:hi] += da_int
            model._b_rest_grad[lo:hi] += dbm_int
            if not static:
                model._etas_grad[interior_idx[0]:interior_idx[-1] + 1] += (
                    g_vec * (1.0 - g_vec) * gate_dots)

        # entry layer
        dpre_e = dh * kernels.gelu_grad(bt.y_entry, bt.sig_entry)
        store.grad_of(f"b{entry}")[...] += model.scale * (dpre_e.T @ bt.t_entry)
        r_e = model.scale * (dpre_e @ store[f"b{entry}"])
        bt.r_entry = r_e
        if static:
            ds_e = r_e + ds_extra
        else:
            g_e = bt.gates[0]
            store.grad_of(f"eta{entry}")[...] += g_e * (1.0 - g_e) * np.sum(r_e * bt.d_entry)
            d_s_total += g_e * np.einsum("bi,bj->bij", r_e, bt.s_entry)
            ds_e = r_e + g_e * np.einsum("bkq,bk->bq", bt.s_op_b, r_e) + ds_extra

        if not static:
            d_s_route = d_s_total if per_example else d_s_total.sum(axis=0, keepdims=True)
            ds_route = _router_backward(model, trace, bi, d_s_route, dsbar_acc,
                                        khat, dkhat_acc, drho_acc)
            ds_e = ds_e + (ds_route if per_example else np.broadcast_to(
                ds_route / batch, (batch, cfg.rank)))

        store.grad_of(f"a{entry}")[...] += ds_e.T @ bt.x_entry_used
        dx_adapter = ds_e @ store[f"a{entry}"]
        if bt.entry_mask is not None:
            dx_adapter = dx_adapter * bt.entry_mask
        dh = dpre_e @ model.backbone.weight(entry) + dx_adapter

    if not static:
        # language-prior path enters every block's fused logits; finalize once
        if trace.prior is not None and cfg.tau_lang > 0.0:
            e = trace.instr.embedding
            lang_scale = 1.0 / (math.sqrt(cfg.d_key) * cfg.t_lang)
            ve = store["r_ctx"] @ e
            ehat = rmsnorm_rows(ve[None, :], cfg.eps)[0]
            dkhat_acc += np.outer(drho_acc, ehat) * lang_scale
            dehat = (drho_acc @ khat) * lang_scale
            dve = rmsnorm_jvp_rows(ve[None, :], dehat[None, :], cfg.eps)[0]
            store.grad_of("r_ctx")[...] += np.outer(dve, e)
        store.grad_of("keys")[...] += rmsnorm_jvp_rows(store["keys"], dkhat_acc, cfg.eps)


def _router_backward(model: Model, trace: ForwardTrace, bi: int, d_s_route: np.ndarray,
                     dsbar_acc, khat: np.ndarray, dkhat_acc: np.ndarray,
                     drho_acc: np.ndarray) -> np.ndarray:
    """Backprop one block's routing decision.  Returns the gradient w.r.t.
    the routing states (the block-entry rank states fed to the query)."""
    cfg, store = model.cfg, model.store
    bt = trace.blocks[bi]
    atoms = store["atoms"]
    alpha = bt.alpha
    rank_sq = cfg.rank * cfg.rank
    atoms_flat = atoms.reshape(cfg.atoms, rank_sq)
    d_s_flat = d_s_route.reshape(-1, rank_sq)

    psi = d_s_flat @ atoms_flat.T
    psibar = np.einsum("bm,bm->b", alpha, psi)
    dz = alpha * (psi - psibar[:, None])
    bt.psi, bt.psibar = psi, psibar

    store.grad_of("atoms")[...] += (alpha.T @ d_s_flat).reshape(atoms.shape)
    if trace.prior is not None and cfg.tau_lang > 0.0:
        drho_acc += cfg.tau_lang * dz.sum(axis=0)

    attn_scale = 1.0 / (math.sqrt(cfg.d_key) * cfg.t_attn)
    qhat = rmsnorm_rows(bt.query, cfg.eps)
    dqhat = (dz @ khat) * attn_scale
    dkhat_acc += (dz.T @ qhat) * attn_scale
    dq = rmsnorm_jvp_rows(bt.query, dqhat, cfg.eps)

    # q = q0 + u @ Q_dep^T
    store.grad_of("q_dep")[...] += dq.T @ bt.u
    du = dq @ store["q_dep"]
    dq0 = dq.copy()

    if bt.beta is not None:
        summaries = trace.summaries[:bi]
        sb = np.stack(summaries, axis=1)  # (Br, completed, rank)
        dbeta = np.einsum("br,bir->bi", du, sb)
        dsbar_all = bt.beta[:, :, None] * du[:, None, :]  # (Br, completed, rank)
        dxi = bt.beta * (dbeta - np.einsum("bi,bi->b", bt.beta, dbeta)[:, None])
        dep_scale = 1.0 / (math.sqrt(cfg.d_key) * cfg.t_dep)
        v0 = bt.q0 @ store["q_dep_q"].T
        qhat0 = rmsnorm_rows(v0, cfg.eps)
        w_all = sb @ store["q_dep_k"].T  # (Br, completed, d_key)
        khat_dep = rmsnorm_lastaxis(w_all, cfg.eps)
        dqhat0 = np.einsum("bi,bid->bd", dxi, khat_dep) * dep_scale
        dv0 = rmsnorm_jvp_rows(v0, dqhat0, cfg.eps)
        store.grad_of("q_dep_q")[...] += dv0.T @ bt.q0
        dq0 += dv0 @ store["q_dep_q"]
        dkhat_all = (dxi * dep_scale)[:, :, None] * qhat0[:, None, :]
        dw_all = rmsnorm_jvp_lastaxis(w_all, dkhat_all, cfg.eps)
        store.grad_of("q_dep_k")[...] += np.einsum("bid,bir->dr", dw_all, sb)
        dsbar_all += dw_all @ store["q_dep_k"]
        for i in range(bi):
            dsbar_acc[i] += dsbar_all[:, i, :]

    store.grad_of("priors")[bi] += dq0.sum(axis=0)
    route_states = bt.s_entry if cfg.routing == "per_example" \
        else bt.s_entry.mean(axis=0, keepdims=True)
    store.grad_of("q_cur")[...] += dq0.T @ route_states
    if trace.instr is not None and cfg.lambda_ctx != 0.0:
        store.grad_of("q_ctx")[...] += cfg.lambda_ctx * np.outer(
            dq0.sum(axis=0), trace.instr.embedding)
    return dq0 @ store["q_cur"]


def _interior_backward_dropout(d_out, interior, masks, w_stk, a_stk, bm_stk, g_vec,
                               s_op_b, scale, ds_extra):
    """Python twin of the interior backward kernel with adapter-input masks."""
    acts, pre, sig, s_st, d_st, t_st = interior
    n = w_stk.shape[0]
    da = np.empty_like(a_stk)
    dbm = np.empty_like(bm_stk)
    gate_dot = np.empty(n)
    r_all = np.empty_like(s_st)
    d_s_op = np.zeros_like(s_op_b)
    dh = d_out
    for i in range(n - 1, -1, -1):
        dpre = dh * kernels.gelu_grad(pre[i], sig[i])
        dbm[i] = scale * (dpre.T @ t_st[i])
        r = scale * (dpre @ bm_stk[i])
        r_all[i] = r
        gate_dot[i] = float(np.sum(r * d_st[i]))
        d_s_op += g_vec[i] * np.einsum("bi,bj->bij", r, s_st[i])
        ds = r + g_vec[i] * np.einsum("bkq,bk->bq", s_op_b, r) + ds_extra
        da[i] = ds.T @ (acts[i] * masks[i])
        dh = dpre @ w_stk[i] + (ds @ a_stk[i]) * masks[i]
    return dh, da, dbm, gate_dot, d_s_op, r_all


# ---------------------------------------------------------------------------
# Backbone (stage 1) gradients
# ---------------------------------------------------------------------------


def backbone_loss_and_grad(backbone: Backbone, x: np.ndarray, y: np.ndarray) -> float:
    pred, cache = backbone_forward(backbone, x)
    x2, y0, sig0, h1, acts, pre, sig, h_top = cache
    y2 = np.asarray(y, dtype=np.float64).reshape(pred.shape)
    loss = mse_loss(pred, y2)
    dpred = mse_grad(pred, y2)
    store = backbone.store
    store.zero_grad()
    store.grad_of("head_w")[...] += dpred.T @ h_top
    store.grad_of("head_b")[...] += dpred.sum(axis=0)
    dh = dpred @ store["head_w"]
    if acts is not None:
        w_stk, _, _ = backbone.interior_stacks(range(0, backbone.cfg.depth))
        dh, dw_stk, db_stk = kernels.mlp_stack_backward(dh, acts, pre, sig, w_stk)
        backbone._w_rest_grad += dw_stk
        backbone._bias_rest_grad += db_stk
    dpre0 = dh * kernels.gelu_grad(y0, sig0)
    store.grad_of("w0")[...] += dpre0.T @ x2
    store.grad_of("bias0")[...] += dpre0.sum(axis=0)
    store.check_finite_grad()
    return loss


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over a flat parameter store.

    Decay applies only where the store's decay mask is set (matrices, not
    gate logits / biases / keys / priors).
    """

    def __init__(self, store, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros_like(store.flat)
        self.v = np.zeros_like(store.flat)
        self.t = 0

    def step(self) -> None:
        s = self.store
        g = s.grad
        self.t += 1
        if self.weight_decay != 0.0:
            s.flat -= self.lr * self.weight_decay * (s.flat * s.decay_mask)
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        s.flat -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def adamw_step(store, grads: dict[str, np.ndarray] | None, state: AdamW) -> None:
    """Single optimizer step; ``grads`` overrides the store's gradient."""
    if grads is not None:
        for name, val in grads.items():
            state.store.grad_of(name)[...] = val
    state.step()


# ---------------------------------------------------------------------------
# Training protocol
# ---------------------------------------------------------------------------


@dataclass
class StageData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass
class TrainSchedule:
    pre_epochs: int = 300
    post_epochs: int = 1000
    pre_lr: float = 3e-3
    post_lr: float = 5e-4
    batch_size: int = 64
    weight_decay: float = 0.01
    eval_every: int = 1
    seed: int = 0
    divergence_threshold: float = DIVERGENCE_THRESHOLD
    log_layer_norms: bool = True


@dataclass
class RunReport:
    config: dict
    method: str
    seed: int
    pretrain: dict | None = None
    post: dict | None = None
    best_train_mse: float = math.inf
    best_test_mse: float = math.inf
    diverged: bool = False

    def to_json(self) -> str:
        return json.dumps(_jsonify(self.__dict__), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def epoch_rows(self) -> list[dict]:
        """Per-epoch CSV rows: epoch, split, mse, grad_concentration,
        per-block route entropy."""
        rows = []
        if self.post is None:
            return rows
        conc = self.post.get("grad_concentration", [])
        ent = self.post.get("route_entropy", [])
        for i, mse in enumerate(self.post["train_mse"]):
            row = {"epoch": i, "split": "target-train", "mse": mse,
                   "grad_concentration": conc[i] if i < len(conc) else ""}
            for b, val in enumerate(ent[i] if i < len(ent) else []):
                row[f"route_entropy_b{b}"] = val
            rows.append(row)
        for i, (ep, mse) in enumerate(zip(self.post["eval_epochs"], self.post["test_mse"])):
            rows.append({"epoch": ep, "split": "target-test", "mse": mse,
                         "grad_concentration": ""})
        return rows


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def evaluate(model: Model, x: np.ndarray, y: np.ndarray,
             instr: Instruction | None = None, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for start in range(0, x.shape[0], batch_size):
        xb = x[start:start + batch_size]
        yb = y[start:start + batch_size]
        pred, _ = forward(model, xb, instr=instr)
        diff = pred - yb.reshape(pred.shape)
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def evaluate_backbone(backbone: Backbone, x: np.ndarray, y: np.ndarray,
                      batch_size: int = 256) -> float:
    total, count = 0.0, 0
    for start in range(0, x.shape[0], batch_size):
        pred, _ = backbone_forward(backbone, x[start:start + batch_size])
        diff = pred - y[start:start + batch_size].reshape(pred.shape)
        total += float(np.sum(diff * diff))
        count += diff.size
    return total / count


def pretrain(backbone: Backbone, data: StageData, schedule: TrainSchedule) -> dict:
    """Stage 1: train the backbone on source data."""
    if backbone.frozen:
        raise RuntimeError("backbone is frozen; cannot pretrain")
    opt = AdamW(backbone.store, schedule.pre_lr, weight_decay=schedule.weight_decay)
    n = data.train_x.shape[0]
    train_mse, test_mse, eval_epochs = [], [], []
    for epoch in range(schedule.pre_epochs):
        perm = seeding.rng(schedule.seed, "shuffle", "pretrain", epoch).permutation(n)
        sq_sum, count = 0.0, 0
        for idx in _batches(n, schedule.batch_size, perm):
            loss = backbone_loss_and_grad(backbone, data.train_x[idx], data.train_y[idx])
            sq_sum += loss * idx.size
            count += idx.size
            opt.step()
        train_mse.append(sq_sum / count)
        if epoch % schedule.eval_every == 0 or epoch == schedule.pre_epochs - 1:
            eval_epochs.append(epoch)
            test_mse.append(evaluate_backbone(backbone, data.test_x, data.test_y))
    return {"train_mse": train_mse, "test_mse": test_mse, "eval_epochs": eval_epochs}


def posttrain(model: Model, data: StageData, schedule: TrainSchedule,
              instr: Instruction | None = None) -> dict:
    """Stage 2: adapt on target data with the backbone frozen."""
    if not model.backbone.frozen:
        model.backbone.freeze()
    cfg = model.cfg
    opt = AdamW(model.store, schedule.post_lr, weight_decay=schedule.weight_decay)
    n = data.train_x.shape[0]
    dropout_rng = seeding.rng(schedule.seed, "dropout") if cfg.dropout > 0 else None
    train_mse, test_mse, eval_epochs = [], [], []
    layer_norms, concentration, route_entropy = [], [], []
    diverged = False
    for epoch in range(schedule.post_epochs):
        perm = seeding.rng(schedule.seed, "shuffle", "posttrain", epoch).permutation(n)
        sq_sum, count, steps = 0.0, 0, 0
        norm_acc = np.zeros(cfg.depth)
        alpha_acc = np.zeros((cfg.blocks, cfg.atoms))
        for idx in _batches(n, schedule.batch_size, perm):
            loss, trace = loss_and_grad(model, data.train_x[idx], data.train_y[idx],
                                        instr=instr, train=True, dropout_rng=dropout_rng)
            sq_sum += loss * idx.size
            count += idx.size
            steps += 1
            if schedule.log_layer_norms:
                norm_acc += _layer_grad_norms(model)
            if not trace.static:
                for b, bt in enumerate(trace.blocks):
                    alpha_acc[b] += bt.alpha.mean(axis=0)
            opt.step()
            if cfg.clip_atoms:
                model.bank().project_operator_norms(1.0)
        epoch_train = sq_sum / count
        train_mse.append(epoch_train)
        if schedule.log_layer_norms:
            layer_norms.append((norm_acc / steps).tolist())
            mean_norm = float(np.mean(norm_acc / steps))
            concentration.append(float(np.max(norm_acc / steps) / mean_norm)
                                 if mean_norm > 0 else 1.0)
        route_entropy.append([
            entropy(alpha_acc[b] / steps) if alpha_acc[b].sum() > 0 else 0.0
            for b in range(cfg.blocks)
        ])
        if epoch % schedule.eval_every == 0 or epoch == schedule.post_epochs - 1:
            eval_epochs.append(epoch)
            test_mse.append(evaluate(model, data.test_x, data.test_y, instr=instr))
        if not math.isfinite(epoch_train) or epoch_train > schedule.divergence_threshold:
            diverged = True
            break
    return {
        "train_mse": train_mse, "test_mse": test_mse, "eval_epochs": eval_epochs,
        "layer_grad_norms": layer_norms, "grad_concentration": concentration,
        "route_entropy": route_entropy, "diverged": diverged,
        "epochs_run": len(train_mse),
    }


def _layer_grad_norms(model: Model) -> np.ndarray:
    """Per-layer adapter gradient norms over (a, b, eta)."""
    sq = np.zeros(model.cfg.depth)
    if model._a_rest_grad is not None and model._a_rest_grad.size:
        sq[1:] += np.einsum("nij,nij->n", model._a_rest_grad, model._a_rest_grad)
        sq[1:] += np.einsum("nij,nij->n", model._b_rest_grad, model._b_rest_grad)
    sq[0] += float(np.sum(model.store.grad_of("a0") ** 2))
    sq[0] += float(np.sum(model.store.grad_of("b0") ** 2))
    if model._etas_grad is not None:
        sq += model._etas_grad**2
    return np.sqrt(sq)


@dataclass
class DataBundle:
    source: StageData
    target: StageData


def train(model: Model, bundle: DataBundle, schedule: TrainSchedule,
          instr: Instruction | None = None) -> RunReport:
    """Two-stage protocol: pretrain the backbone on source data, freeze it,
    then adapt on target data.  Divergence (loss above the threshold)
    aborts the run and is recorded on the report."""
    report = RunReport(config=model.cfg.__dict__.copy(), method=model.cfg.method,
                       seed=schedule.seed)
    if schedule.pre_epochs > 0 and not model.backbone.frozen:
        report.pretrain = pretrain(model.backbone, bundle.source, schedule)
    model.backbone.freeze()
    if schedule.post_epochs > 0:
        report.post = posttrain(model, bundle.target, schedule, instr=instr)
        report.diverged = report.post["diverged"]
        finite_train = [v for v in report.post["train_mse"] if math.isfinite(v)]
        if finite_train:
            report.best_train_mse = min(finite_train)
        finite_test = [v for v in report.post["test_mse"] if math.isfinite(v)]
        if finite_test:
            report.best_test_mse = min(finite_test)
    return report
