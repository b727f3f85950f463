"""Frozen backbone plus adapter orchestration.

The mandatory backbone is a GELU MLP whose hidden layers all carry
low-rank adapters; a tiny single-head transformer (forward-only, for the
attention-projection variant) is available as an optional configuration.
The forward pass executes blocks in depth order: compute the entry rank
state, build the block query, route against the atom bank, then apply the
gated rank-space adapter to every layer of the block, accumulating the
block-mean rank state for later blocks' depth summaries.

Layer math runs through the kernel backends; the trace records every
intermediate the backward pass and the analytics need.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from rankmem import adapter as ad
from rankmem import depth as dp
from rankmem import kernels, seeding
from rankmem import router as rt
from rankmem.numerics import rmsnorm_rows, topk_softmax_rows
from rankmem.params import ParamStore

METHODS = ("queryable", "lora")
ROUTING_MODES = ("per_example", "batch_mean")
BACKBONES = ("mlp", "tiny_transformer")


@dataclass
class ModelConfig:
    depth: int = 32
    width: int = 32
    in_dim: int = 2
    out_dim: int = 1
    rank: int = 8
    atoms: int = 8
    k_active: int = 2
    blocks: int = 4
    alpha_scale: float = 16.0
    d_key: int = 32
    d_ctx: int = 32
    t_attn: float = 1.0
    t_lang: float = 1.0
    t_dep: float = 1.0
    tau_lang: float = 0.0
    lambda_ctx: float = 0.0
    gate_init: float = -2.0
    dropout: float = 0.0
    eps: float = 1e-6
    method: str = "queryable"
    routing: str = "per_example"
    backbone: str = "mlp"
    clip_atoms: bool = False
    clamp_gates: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.routing not in ROUTING_MODES:
            raise ValueError(f"routing must be one of {ROUTING_MODES}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if not 1 <= self.k_active <= self.atoms:
            raise ValueError("need 1 <= k_active <= atoms")
        if not 1 <= self.blocks <= self.depth:
            raise ValueError("need 1 <= blocks <= depth")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def with_updates(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------


class Backbone:
    """GELU MLP: in_dim -> width x depth -> out_dim head.  Layer 0 maps the
    input; layers 1..depth-1 are uniform width; the head is linear."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        # uniform-width layers are laid out contiguously so the per-block
        # weight stacks the kernels consume are plain views
        rest = list(range(1, cfg.depth))
        specs = [(f"w{i}", (cfg.width, cfg.width), True) for i in rest]
        specs += [(f"bias{i}", (cfg.width,), False) for i in rest]
        specs += [("w0", (cfg.width, cfg.in_dim), True), ("bias0", (cfg.width,), False),
                  ("head_w", (cfg.out_dim, cfg.width), True),
                  ("head_b", (cfg.out_dim,), False)]
        self.store = ParamStore(specs)
        for i in range(cfg.depth):
            d_in = cfg.in_dim if i == 0 else cfg.width
            w = seeding.rng(seed, "backbone", "w", i).standard_normal((cfg.width, d_in))
            self.store[f"w{i}"][...] = w / np.sqrt(d_in)
        head = seeding.rng(seed, "backbone", "head").standard_normal((cfg.out_dim, cfg.width))
        self.store["head_w"][...] = head / np.sqrt(cfg.width)
        if rest:
            self._w_rest = self.store.region([f"w{i}" for i in rest])
            self._bias_rest = self.store.region([f"bias{i}" for i in rest])
            self._w_rest_grad = self.store.grad_region([f"w{i}" for i in rest])
            self._bias_rest_grad = self.store.grad_region([f"bias{i}" for i in rest])
        else:
            self._w_rest = np.zeros((0, cfg.width, cfg.width))
            self._bias_rest = np.zeros((0, cfg.width))
            self._w_rest_grad = self._w_rest.copy()
            self._bias_rest_grad = self._bias_rest.copy()
        self._stacks: dict | None = None

    @property
    def frozen(self) -> bool:
        return not self.store.flat.flags.writeable

    def freeze(self) -> None:
        """Read-only arena: no optimizer can touch the backbone afterwards."""
        self.store.freeze()
        self._stacks = None

    def weight(self, i: int) -> np.ndarray:
        return self.store[f"w{i}"]

    def bias(self, i: int) -> np.ndarray:
        return self.store[f"bias{i}"]

    def interior_stacks(self, layers: range) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(w, wt, bias) stacks for layers[1:]; w/bias are views of the
        contiguous layout, wt is a transposed copy cached while frozen."""
        key = (layers.start, layers.stop)
        if self.frozen and self._stacks is not None and key in self._stacks:
            return self._stacks[key]
        lo, hi = layers.start, layers.stop - 1  # rows of the rest-region
        w = self._w_rest[lo:hi]
        bias = self._bias_rest[lo:hi]
        wt = np.ascontiguousarray(w.transpose(0, 2, 1)) if w.size else w
        stacks = (w, wt, bias)
        if self.frozen:
            if self._stacks is None:
                self._stacks = {}
            self._stacks[key] = stacks
        return stacks


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class Model:
    """Frozen MLP backbone + adapter/router/bank parameter store."""

    def __init__(self, cfg: ModelConfig, seed: int, backbone: Backbone | None = None):
        if cfg.backbone != "mlp":
            raise ValueError("Model hosts the MLP backbone; use TinyTransformer otherwise")
        self.cfg = cfg
        self.seed = seed
        self.backbone = backbone if backbone is not None else Backbone(cfg, seed)
        self.partition = dp.BlockPartition.equal(cfg.depth, cfg.blocks)
        self.store = ParamStore(self._adapter_specs())
        rest = [f"a{i}" for i in range(1, cfg.depth)]
        self._a_rest = self.store.region(rest) if rest else None
        self._a_rest_grad = self.store.grad_region(rest) if rest else None
        rest_b = [f"b{i}" for i in range(1, cfg.depth)]
        self._b_rest = self.store.region(rest_b) if rest_b else None
        self._b_rest_grad = self.store.grad_region(rest_b) if rest_b else None
        if cfg.method == "queryable":
            etas = [f"eta{i}" for i in range(cfg.depth)]
            self._etas = self.store.region(etas)
            self._etas_grad = self.store.grad_region(etas)
        else:
            self._etas = self._etas_grad = None
        self._init_adapters()

    # -- parameter layout ---------------------------------------------------

    def _adapter_specs(self):
        cfg = self.cfg
        rest = list(range(1, cfg.depth))
        specs = [(f"a{i}", (cfg.rank, cfg.width), True) for i in rest]
        specs += [(f"b{i}", (cfg.width, cfg.rank), True) for i in rest]
        specs += [("a0", (cfg.rank, cfg.in_dim), True), ("b0", (cfg.width, cfg.rank), True)]
        if cfg.method == "queryable":
            specs += [(f"eta{i}", (), False) for i in range(cfg.depth)]
            specs += [
                ("priors", (cfg.blocks, cfg.d_key), False),
                ("q_cur", (cfg.d_key, cfg.rank), True),
                ("q_dep", (cfg.d_key, cfg.rank), True),
                ("q_ctx", (cfg.d_key, cfg.d_ctx), True),
                ("r_ctx", (cfg.d_key, cfg.d_ctx), True),
                ("q_dep_q", (cfg.d_key, cfg.d_key), True),
                ("q_dep_k", (cfg.d_key, cfg.rank), True),
                ("atoms", (cfg.atoms, cfg.rank, cfg.rank), True),
                ("keys", (cfg.atoms, cfg.d_key), False),
            ]
        return specs

    def _init_adapters(self):
        cfg, seed, store = self.cfg, self.seed, self.store
        for i in range(cfg.depth):
            d_in = cfg.in_dim if i == 0 else cfg.width
            a = seeding.rng(seed, "adapter", i, "a").standard_normal((cfg.rank, d_in))
            store[f"a{i}"][...] = a / np.sqrt(d_in)
            # b stays zero: adapters start as the identity update
            if cfg.method == "queryable":
                store[f"eta{i}"][...] = cfg.gate_init
        if cfg.method != "queryable":
            return
        for b in range(cfg.blocks):
            w = seeding.rng(seed, "router", "prior", b).standard_normal(cfg.d_key)
            store["priors"][b] = w / np.sqrt(cfg.d_key)
        fans = {"q_cur": cfg.rank, "q_dep": cfg.rank, "q_ctx": cfg.d_ctx,
                "r_ctx": cfg.d_ctx, "q_dep_q": cfg.d_key, "q_dep_k": cfg.rank}
        for name, fan in fans.items():
            m = seeding.rng(seed, "router", name).standard_normal(store[name].shape)
            store[name][...] = m / np.sqrt(fan)
        proto = rt.AtomBank.init_random(cfg.atoms, cfg.rank, cfg.d_key, seed)
        store["atoms"][...] = proto.atoms
        store["keys"][...] = proto.keys

    # -- views --------------------------------------------------------------

    @property
    def is_static(self) -> bool:
        return self.cfg.method == "lora" or self.cfg.clamp_gates

    @property
    def scale(self) -> float:
        return self.cfg.alpha_scale / self.cfg.rank

    def bank(self) -> rt.AtomBank:
        return rt.AtomBank(self.store["atoms"], self.store["keys"],
                           meta={"seed": self.seed})

    def router_params(self) -> rt.RouterParams:
        cfg, store = self.cfg, self.store
        return rt.RouterParams(
            q_cur=store["q_cur"], q_dep=store["q_dep"], q_ctx=store["q_ctx"],
            r_ctx=store["r_ctx"], q_dep_q=store["q_dep_q"], q_dep_k=store["q_dep_k"],
            layer_priors=store["priors"], t_attn=cfg.t_attn, t_lang=cfg.t_lang,
            t_dep=cfg.t_dep, tau_lang=cfg.tau_lang, lambda_ctx=cfg.lambda_ctx,
            k_active=cfg.k_active, eps=cfg.eps,
        )

    def adapter_layer(self, i: int) -> ad.AdapterLayer:
        eta = float(self.store[f"eta{i}"]) if f"eta{i}" in self.store else -np.inf
        if self.cfg.clamp_gates:
            eta = -np.inf
        return ad.AdapterLayer(
            a=self.store[f"a{i}"], b=self.store[f"b{i}"],
            eta=eta if np.isfinite(eta) else -1e9,
            alpha_scale=self.cfg.alpha_scale, dropout_rate=self.cfg.dropout,
        )

    def gates(self) -> np.ndarray:
        if self.is_static:
            return np.zeros(self.cfg.depth)
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-self._etas))

    def count_trainable(self) -> int:
        return self.store.size

    def clone(self) -> "Model":
        twin = Model(self.cfg, self.seed, backbone=self.backbone)
        twin.store.flat[:] = self.store.flat
        return twin


# ---------------------------------------------------------------------------
# Forward trace
# ---------------------------------------------------------------------------


@dataclass
class BlockTrace:
    layers: range
    x_entry: np.ndarray
    x_entry_used: np.ndarray
    s_entry: np.ndarray
    d_entry: np.ndarray | None
    t_entry: np.ndarray
    y_entry: np.ndarray
    sig_entry: np.ndarray
    sbar: np.ndarray
    q0: np.ndarray | None = None
    query: np.ndarray | None = None
    u: np.ndarray | None = None
    beta: np.ndarray | None = None
    zeta: np.ndarray | None = None
    fused: np.ndarray | None = None
    active: np.ndarray | None = None
    alpha: np.ndarray | None = None
    s_op: np.ndarray | None = None     # (Br, r, r) routing-batch operators
    s_op_b: np.ndarray | None = None   # (B, r, r) per-example operators
    interior: tuple | None = None      # (acts, preacts, sig, s_st, d_st, t_st)
    interior_masks: np.ndarray | None = None
    entry_mask: np.ndarray | None = None
    gates: np.ndarray | None = None    # (n_layers,) gate values, entry first
    r_entry: np.ndarray | None = None      # filled by backward
    r_interior: np.ndarray | None = None   # filled by backward
    psi: np.ndarray | None = None          # filled by backward
    psibar: np.ndarray | None = None       # filled by backward


@dataclass
class ForwardTrace:
    x: np.ndarray
    pred: np.ndarray
    h_top: np.ndarray
    blocks: list[BlockTrace]
    summaries: list[np.ndarray]
    rho: np.ndarray | None
    prior: np.ndarray | None
    instr: rt.Instruction | None
    static: bool
    route_rows: int  # 1 for batch-mean routing, batch size otherwise
    tau_lang: float = 0.0

    def route_result(self, block: int, example: int = 0) -> rt.RouteResult:
        """Reconstruct the routing decision of one block (and example)."""
        bt = self.blocks[block]
        if bt.alpha is None:
            raise ValueError("static forward has no routing decisions")
        row = 0 if self.route_rows == 1 else example
        return rt.RouteResult(
            query=bt.query[row].copy(), zeta=bt.zeta[row].copy(),
            rho=None if self.rho is None else self.rho.copy(),
            prior=None if self.prior is None else self.prior.copy(),
            fused=bt.fused[row].copy(), active_set=bt.active[row].copy(),
            alpha=bt.alpha[row].copy(), operator=bt.s_op[row].copy(),
            tau_lang=self.tau_lang if self.prior is not None else 0.0,
        )


def _as_batch(x: np.ndarray, in_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != in_dim:
            raise ValueError("input dimension mismatch")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != in_dim:
        raise ValueError("input must be (batch, in_dim)")
    return x, False


# ---------------------------------------------------------------------------
# Forward engine (MLP backbone)
# ---------------------------------------------------------------------------


def forward(model: Model, x: np.ndarray, instr: rt.Instruction | None = None,
            train: bool = False, dropout_rng: np.random.Generator | None = None,
            force_static: bool = False) -> tuple[np.ndarray, ForwardTrace]:
    """Run the routed forward pass; returns (prediction, trace)."""
    cfg = model.cfg
    x2, single = _as_batch(x, cfg.in_dim)
    batch = x2.shape[0]
    static = model.is_static or force_static
    use_dropout = train and cfg.dropout > 0.0
    if use_dropout and dropout_rng is None:
        raise ValueError("dropout requires a dropout_rng at train time")

    store = model.store
    rp = model.router_params() if not static else None
    bank_atoms = store["atoms"] if not static and "atoms" in store else None
    gates_all = model.gates() if not static else None
    khat = None
    if not static:
        khat = rmsnorm_rows(store["keys"], cfg.eps)
        attn_scale = 1.0 / (np.sqrt(cfg.d_key) * cfg.t_attn)

    rho = prior = None
    if not static and instr is not None:
        rho = rt.language_logits(model.bank(), rp, instr)
        prior = np.exp(rho - rho.max())
        prior /= prior.sum()

    summaries: list[np.ndarray] = []
    blocks: list[BlockTrace] = []
    h = x2
    for bi, layer_range in enumerate(model.partition):
        entry = layer_range.start
        x_entry = h
        entry_mask = None
        x_used = x_entry
        if use_dropout:
            entry_mask = ad.dropout_mask(x_entry.shape, cfg.dropout, dropout_rng)
            x_used = x_entry * entry_mask
        s_entry = x_used @ store[f"a{entry}"].T

        bt = BlockTrace(layers=layer_range, x_entry=x_entry, x_entry_used=x_used,
                        s_entry=s_entry, d_entry=None, t_entry=s_entry,
                        y_entry=None, sig_entry=None, sbar=None,
                        entry_mask=entry_mask)

        if static:
            s_op_b = np.zeros((batch, cfg.rank, cfg.rank))
            g_entry = 0.0
            t_entry = s_entry
        else:
            route_states = s_entry if cfg.routing == "per_example" \
                else s_entry.mean(axis=0, keepdims=True)
            query, q0, u, beta = dp.build_query_rows(
                rp, store["priors"][bi], route_states, instr, summaries)
            zeta = (rmsnorm_rows(query, cfg.eps) @ khat.T) * attn_scale
            if instr is not None and cfg.tau_lang > 0.0:
                fused = zeta + cfg.tau_lang * np.log(prior)[None, :]
            else:
                fused = zeta
            active, alpha = topk_softmax_rows(fused, cfg.k_active)
            rank_sq = cfg.rank * cfg.rank
            s_op = (alpha @ bank_atoms.reshape(cfg.atoms, rank_sq)).reshape(
                -1, cfg.rank, cfg.rank)
            if cfg.routing == "per_example":
                s_op_b = s_op
            else:
                s_op_b = np.ascontiguousarray(np.broadcast_to(s_op, (batch, cfg.rank, cfg.rank)))
            g_entry = gates_all[entry]
            d_entry = np.einsum("bij,bj->bi", s_op_b, s_entry)
            t_entry = s_entry + g_entry * d_entry
            bt.q0, bt.query, bt.u, bt.beta = q0, query, u, beta
            bt.zeta, bt.fused, bt.active, bt.alpha = zeta, fused, active, alpha
            bt.s_op, bt.d_entry = s_op, d_entry
        bt.s_op_b = s_op_b
        bt.t_entry = t_entry

        y_entry = (x_entry @ model.backbone.weight(entry).T
                   + model.backbone.bias(entry)
                   + model.scale * (t_entry @ store[f"b{entry}"].T))
        h_act, sig_entry = kernels.gelu(y_entry)
        bt.y_entry, bt.sig_entry = y_entry, sig_entry

        interior_idx = list(layer_range)[1:]
        rank_states = [s_entry]
        g_vec = np.zeros(len(interior_idx))
        if interior_idx:
            w_stk, wt_stk, bias_stk = model.backbone.interior_stacks(layer_range)
            a_stk = model._a_rest[layer_range.start:layer_range.stop - 1]
            at_stk = np.ascontiguousarray(a_stk.transpose(0, 2, 1))
            bm_stk = model._b_rest[layer_range.start:layer_range.stop - 1]
            bmt_stk = np.ascontiguousarray(bm_stk.transpose(0, 2, 1))
            if not static:
                g_vec = gates_all[interior_idx[0]:interior_idx[-1] + 1]
            if use_dropout:
                h, bt.interior, bt.interior_masks, s_list = _interior_forward_dropout(
                    h_act, wt_stk, bias_stk, a_stk, bm_stk, g_vec, s_op_b,
                    model.scale, cfg.dropout, dropout_rng)
                rank_states += s_list
            else:
                acts, pre, sig, s_st, d_st, t_st = kernels.adapter_block_forward(
                    h_act, wt_stk, bias_stk, at_stk, bmt_stk, g_vec, s_op_b, model.scale)
                bt.interior = (acts, pre, sig, s_st, d_st, t_st)
                rank_states += [s_st[j] for j in range(len(interior_idx))]
                h = acts[-1]
        else:
            h = h_act

        bt.gates = np.concatenate(([0.0 if static else g_entry], g_vec))
        sbar = sum(rank_states) / len(rank_states)
        if not static and cfg.routing == "batch_mean":
            sbar = sbar.mean(axis=0, keepdims=True)
        bt.sbar = sbar
        if not static:
            summaries.append(sbar)
        blocks.append(bt)

    pred = h @ model.backbone.store["head_w"].T + model.backbone.store["head_b"]
    trace = ForwardTrace(x=x2, pred=pred, h_top=h, blocks=blocks, summaries=summaries,
                         rho=rho, prior=prior, instr=instr, static=static,
                         route_rows=1 if cfg.routing == "batch_mean" else batch,
                         tau_lang=cfg.tau_lang)
    return (pred[0] if single else pred), trace


def _interior_forward_dropout(h, wt_stk, bias_stk, a_stk, bm_stk, g_vec, s_op_b,
                              scale, rate, rng):
    """Python path for interior layers when adapter dropout is active."""
    n, batch, width = wt_stk.shape[0], h.shape[0], h.shape[1]
    rank = a_stk.shape[1]
    acts = np.empty((n + 1, batch, width))
    pre = np.empty((n, batch, width))
    sig = np.empty((n, batch, width))
    s_st = np.empty((n, batch, rank))
    d_st = np.empty((n, batch, rank))
    t_st = np.empty((n, batch, rank))
    masks = np.empty((n, batch, width))
    acts[0] = h
    for i in range(n):
        masks[i] = ad.dropout_mask((batch, width), rate, rng)
        x_used = acts[i] * masks[i]
        s = x_used @ a_stk[i].T
        d = np.einsum("bij,bj->bi", s_op_b, s)
        t = s + g_vec[i] * d
        pre[i] = acts[i] @ wt_stk[i] + bias_stk[i] + scale * (t @ bm_stk[i].T)
        acts[i + 1], sig[i] = kernels.gelu(pre[i])
        s_st[i], d_st[i], t_st[i] = s, d, t
    s_list = [s_st[i] for i in range(n)]
    return acts[-1], (acts, pre, sig, s_st, d_st, t_st), masks, s_list


def lora_baseline_forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Static low-rank reference path: gates forced to zero, routing skipped."""
    pred, _ = forward(model, x, instr=None, force_static=True)
    return pred


def backbone_forward(backbone: Backbone, x: np.ndarray):
    """Adapter-free forward used by stage-1 pretraining; returns (pred, cache)."""
    cfg = backbone.cfg
    x2, single = _as_batch(x, cfg.in_dim)
    y0 = x2 @ backbone.weight(0).T + backbone.bias(0)
    h1, sig0 = kernels.gelu(y0)
    layer_range = range(0, cfg.depth)
    w_stk, wt_stk, bias_stk = backbone.interior_stacks(layer_range)
    if cfg.depth > 1:
        acts, pre, sig = kernels.mlp_stack_forward(h1, wt_stk, bias_stk)
        h_top = acts[-1]
    else:
        acts = pre = sig = None
        h_top = h1
    pred = h_top @ backbone.store["head_w"].T + backbone.store["head_b"]
    cache = (x2, y0, sig0, h1, acts, pre, sig, h_top)
    return (pred[0] if single else pred), cache


# ---------------------------------------------------------------------------
# Tiny single-head transformer (optional backbone, forward-only)
# ---------------------------------------------------------------------------


class TinyTransformer:
    """Single-head attention stack over per-coordinate tokens.

    Exercises the attention-projection adapters: one routed operator per
    block is shared across the Q/K/V/O projection adapters of its layers.
    Inference-only; training and the benchmark protocol use the MLP.
    """

    def __init__(self, cfg: ModelConfig, seed: int):
        if cfg.backbone != "tiny_transformer":
            raise ValueError("config does not request the tiny transformer")
        self.cfg = cfg
        self.seed = seed
        d = cfg.width
        self.lift = seeding.rng(seed, "tt", "lift").standard_normal((cfg.in_dim, d))
        self.pos = seeding.rng(seed, "tt", "pos").standard_normal((cfg.in_dim, d)) * 0.1
        self.frozen = []
        for i in range(cfg.depth):
            layer = {
                p: seeding.rng(seed, "tt", "w", i, p).standard_normal((d, d)) / np.sqrt(d)
                for p in ad.PROJECTIONS
            }
            self.frozen.append(layer)
        self.head_w = seeding.rng(seed, "tt", "head").standard_normal((cfg.out_dim, d)) / np.sqrt(d)
        self.head_b = np.zeros(cfg.out_dim)
        self.adapters = [
            ad.AttentionAdapter.init_random(d, cfg.rank, seed, ("tt", i),
                                            alpha_scale=cfg.alpha_scale, eta=cfg.gate_init)
            for i in range(cfg.depth)
        ]
        self.partition = dp.BlockPartition.equal(cfg.depth, cfg.blocks)
        proto = rt.AtomBank.init_random(cfg.atoms, cfg.rank, cfg.d_key, seed)
        self.bank = proto
        rng = seeding.rng(seed, "tt", "router")
        self.router_params = rt.RouterParams(
            q_cur=rng.standard_normal((cfg.d_key, cfg.rank)) / np.sqrt(cfg.rank),
            q_dep=rng.standard_normal((cfg.d_key, cfg.rank)) / np.sqrt(cfg.rank),
            q_ctx=rng.standard_normal((cfg.d_key, cfg.d_ctx)) / np.sqrt(cfg.d_ctx),
            r_ctx=rng.standard_normal((cfg.d_key, cfg.d_ctx)) / np.sqrt(cfg.d_ctx),
            q_dep_q=rng.standard_normal((cfg.d_key, cfg.d_key)) / np.sqrt(cfg.d_key),
            q_dep_k=rng.standard_normal((cfg.d_key, cfg.rank)) / np.sqrt(cfg.rank),
            layer_priors=rng.standard_normal((cfg.blocks, cfg.d_key)) / np.sqrt(cfg.d_key),
            t_attn=cfg.t_attn, t_lang=cfg.t_lang, t_dep=cfg.t_dep,
            tau_lang=cfg.tau_lang, lambda_ctx=cfg.lambda_ctx,
            k_active=cfg.k_active, eps=cfg.eps,
        )

    def _shared_state(self, h: np.ndarray, att: ad.AttentionAdapter) -> np.ndarray:
        """Batch of shared router states: token-mean Q/K/V rank states / 3."""
        out = np.zeros((h.shape[0], self.cfg.rank))
        for p in ("q", "k", "v"):
            out += np.einsum("btd,rd->br", h, att.layers[p].a) / h.shape[1]
        return out / 3.0

    def forward(self, x: np.ndarray, instr: rt.Instruction | None = None,
                force_static: bool = False):
        """Returns (pred, per-block alpha list)."""
        cfg = self.cfg
        x2, single = _as_batch(x, cfg.in_dim)
        batch = x2.shape[0]
        h = x2[:, :, None] * self.lift[None, :, :] + self.pos[None, :, :]
        static = force_static or cfg.clamp_gates
        summaries: list[np.ndarray] = []
        alphas: list[np.ndarray] = []
        scale = cfg.alpha_scale / cfg.rank
        for bi, layer_range in enumerate(self.partition):
            entry = layer_range.start
            s_entry = self._shared_state(h, self.adapters[entry])
            if static:
                s_op_b = np.zeros((batch, cfg.rank, cfg.rank))
            else:
                query, *_ = dp.build_query_rows(
                    self.router_params, self.router_params.layer_priors[bi],
                    s_entry, instr, summaries)
                zeta = rt.state_logits_rows(self.bank, self.router_params, query)
                if instr is not None and cfg.tau_lang > 0.0:
                    prior = rt.language_prior(self.bank, self.router_params, instr)
                    fused = zeta + cfg.tau_lang * np.log(prior)[None, :]
                else:
                    fused = zeta
                from rankmem.numerics import rmsnorm_rows, topk_softmax_rows
                _, alpha = topk_softmax_rows(fused, cfg.k_active)
                alphas.append(alpha)
                s_op_b = np.einsum("bm,mij->bij", alpha, self.bank.atoms)
            states = []
            for i in layer_range:
                h = self._attention_layer(h, i, s_op_b, static, scale)
                states.append(self._shared_state(h, self.adapters[i]))
            if not static:
                summaries.append(sum(states) / len(states))
        pooled = h.mean(axis=1)
        pred = pooled @ self.head_w.T + self.head_b
        return (pred[0] if single else pred), alphas

    def _attention_layer(self, h, i, s_op_b, static, scale):
        frozen = self.frozen[i]
        att = self.adapters[i]

        def project(p, src):
            layer = att.layers[p]
            out = src @ frozen[p].T
            s = np.einsum("btd,rd->btr", src, layer.a)
            if not static:
                d = np.einsum("bij,btj->bti", s_op_b, s)
                t = s + layer.g * d
            else:
                t = s
            return out + scale * np.einsum("btr,dr->btd", t, layer.b)

        q = project("q", h)
        k = project("k", h)
        v = project("v", h)
        logits = np.einsum("btd,bsd->bts", q, k) / np.sqrt(h.shape[2])
        logits -= logits.max(axis=2, keepdims=True)
        attn = np.exp(logits)
        attn /= attn.sum(axis=2, keepdims=True)
        ctx = np.einsum("bts,bsd->btd", attn, v)
        return h + project("o", ctx)


def build_model(cfg: ModelConfig, seed: int, backbone: Backbone | None = None):
    if cfg.backbone == "mlp":
        return Model(cfg, seed, backbone=backbone)
    return TinyTransformer(cfg, seed)
