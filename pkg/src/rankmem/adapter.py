"""Gated rank-space adapter algebra.

A layer's update is (alpha_L / r) * B (I + g S) A for the block's routed
operator S and a learned sigmoid gate g.  At g = 0 this is exactly the
static low-rank update (alpha_L / r) * B A.  The attention variant reuses
one S across the Q/K/V/O projections with per-projection factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rankmem import seeding

PROJECTIONS = ("q", "k", "v", "o")


def gate(eta: float) -> float:
    """Numerically stable logistic sigmoid."""
    if not math.isfinite(eta):
        raise ValueError("non-finite gate logit")
    if eta >= 0:
        return 1.0 / (1.0 + math.exp(-eta))
    z = math.exp(eta)
    return z / (1.0 + z)


def gate_grad(eta: float) -> float:
    g = gate(eta)
    return g * (1.0 - g)


@dataclass
class AdapterLayer:
    """Low-rank factors and gate for one adapted layer.

    ``a`` is (rank, d_in), ``b`` is (d_out, rank).  ``eta`` is the gate
    logit; ``prior`` is the routing layer prior, present only on block
    entry layers.
    """

    a: np.ndarray
    b: np.ndarray
    eta: float
    alpha_scale: float = 16.0
    dropout_rate: float = 0.0
    prior: np.ndarray | None = None

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise ValueError("factor shapes inconsistent")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha_scale / self.rank

    @property
    def g(self) -> float:
        return gate(self.eta)

    @classmethod
    def init_random(cls, d_in: int, d_out: int, rank: int, seed: int, tag,
                    alpha_scale: float = 16.0, eta: float = -2.0) -> "AdapterLayer":
        """Gaussian/sqrt(d_in) down-projection, zero up-projection (so the
        initial update is zero), gate logit at ``eta``."""
        a = seeding.rng(seed, "adapter", tag, "a").standard_normal((rank, d_in))
        a /= np.sqrt(d_in)
        return cls(a=a, b=np.zeros((d_out, rank)), eta=eta, alpha_scale=alpha_scale)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-scaling dropout mask (train-time only)."""
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def rank_transform(layer: AdapterLayer, s_op: np.ndarray, s: np.ndarray):
    """Routed residual in rank space: d = S s, t = s + g d."""
    s = np.asarray(s, dtype=np.float64)
    if s_op.shape != (layer.rank, layer.rank) or s.shape[0] != layer.rank:
        raise ValueError("operator/state shape mismatch")
    d = s_op @ s
    return d, s + layer.g * d


def delta_w(layer: AdapterLayer, s_op: np.ndarray) -> np.ndarray:
    """Dense update matrix (alpha_L / r) B (I + g S) A."""
    if s_op.shape != (layer.rank, layer.rank):
        raise ValueError("operator shape mismatch")
    core = np.eye(layer.rank) + layer.g * s_op
    return layer.scale * layer.b @ core @ layer.a


def apply_adapter(layer: AdapterLayer, s_op: np.ndarray, h: np.ndarray,
                  w0h: np.ndarray, rng: np.random.Generator | None = None,
                  train: bool = False) -> np.ndarray:
    """Frozen-path output plus the adapter's routed residual contribution.

    Equals ``w0h + delta_w(layer, s_op) @ h`` whenever dropout is inactive.
    """
    h = np.asarray(h, dtype=np.float64)
    if train and layer.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("dropout requires an rng at train time")
        h = h * dropout_mask(h.shape, layer.dropout_rate, rng)
    s = layer.a @ h
    _, t = rank_transform(layer, s_op, s)
    return w0h + layer.scale * (layer.b @ t)


@dataclass
class AttentionAdapter:
    """Per-projection adapters sharing one routed operator within a block."""

    layers: dict[str, AdapterLayer] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.layers) != set(PROJECTIONS):
            raise ValueError(f"need exactly projections {PROJECTIONS}")
        ranks = {layer.rank for layer in self.layers.values()}
        if len(ranks) != 1:
            raise ValueError("all projections must share the rank")

    @property
    def rank(self) -> int:
        return next(iter(self.layers.values())).rank

    @classmethod
    def init_random(cls, d_model: int, rank: int, seed: int, tag,
                    alpha_scale: float = 16.0, eta: float = -2.0) -> "AttentionAdapter":
        layers = {
            p: AdapterLayer.init_random(d_model, d_model, rank, seed, (tag, p),
                                        alpha_scale=alpha_scale, eta=eta)
            for p in PROJECTIONS
        }
        return cls(layers=layers)


def attention_delta_w(att: AttentionAdapter, s_op: np.ndarray, proj: str) -> np.ndarray:
    """Dense update for one attention projection."""
    if proj not in PROJECTIONS:
        raise ValueError(f"unknown projection {proj!r}")
    return delta_w(att.layers[proj], s_op)


def attention_router_state(r_q: np.ndarray, r_k: np.ndarray, r_v: np.ndarray) -> np.ndarray:
    """Shared router state: mean over tokens of Q/K/V rank states, averaged.

    Inputs are (tokens, rank) token-level rank states.
    """
    states = [np.asarray(x, dtype=np.float64) for x in (r_q, r_k, r_v)]
    shapes = {x.shape for x in states}
    if len(shapes) != 1:
        raise ValueError("token counts / ranks differ between projections")
    if states[0].shape[0] == 0:
        raise ValueError("empty token set")
    return sum(x.mean(axis=0) for x in states) / 3.0
