"""Block partitioning, completed-block summaries, and query construction.

Routing happens once per block of contiguous layers.  The query for block
b combines a per-block layer prior, the projected block-entry rank state,
an optional projected instruction embedding, and an attention-style
summary over the mean rank states of completed blocks.  Summaries only
ever cover blocks strictly before b (causality).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rankmem import numerics
from rankmem.router import Instruction, RouterParams


@dataclass(frozen=True)
class BlockPartition:
    """Contiguous, disjoint, depth-ordered ranges covering all adapted layers."""

    blocks: tuple[range, ...]

    def __post_init__(self):
        expected = self.blocks[0].start
        for rng_ in self.blocks:
            if rng_.step != 1 or len(rng_) == 0:
                raise ValueError("blocks must be non-empty unit-step ranges")
            if rng_.start != expected:
                raise ValueError("blocks must be contiguous and ordered")
            expected = rng_.stop

    @classmethod
    def equal(cls, n_layers: int, n_blocks: int) -> "BlockPartition":
        """Equal-size contiguous blocks; remainder layers join the last block."""
        if not 1 <= n_blocks <= n_layers:
            raise ValueError("need 1 <= n_blocks <= n_layers")
        size = n_layers // n_blocks
        starts = [i * size for i in range(n_blocks)]
        stops = starts[1:] + [n_layers]
        return cls(tuple(range(a, b) for a, b in zip(starts, stops)))

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)


@dataclass
class DepthContext:
    """Mean rank states of completed blocks, one (batch, rank) row set each."""

    summaries: list[np.ndarray] = field(default_factory=list)

    def append(self, sbar: np.ndarray) -> None:
        self.summaries.append(np.asarray(sbar, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.summaries)


def block_mean(states) -> np.ndarray:
    """Arithmetic mean of equally shaped state vectors."""
    states = [np.asarray(s, dtype=np.float64) for s in states]
    if not states:
        raise ValueError("empty state list")
    if len({s.shape for s in states}) != 1:
        raise ValueError("state dims differ")
    return sum(states) / len(states)


# ---------------------------------------------------------------------------
# Attention-style depth summary (batched core + single-vector wrappers)
# ---------------------------------------------------------------------------


def depth_logits_rows(params: RouterParams, q0: np.ndarray, summaries) -> np.ndarray:
    """(batch, completed) logits scoring q0 against each completed summary."""
    if len(summaries) == 0:
        raise ValueError("empty depth context")
    d_key = params.q_dep_q.shape[0]
    qhat = numerics.rmsnorm_rows(q0 @ params.q_dep_q.T, params.eps)
    stack = np.stack(summaries, axis=1)  # (batch, completed, rank)
    khat = numerics.rmsnorm_lastaxis(stack @ params.q_dep_k.T, params.eps)
    return np.einsum("bd,bid->bi", qhat, khat) / (np.sqrt(d_key) * params.t_dep)


def depth_summary_rows(params: RouterParams, q0: np.ndarray, summaries):
    """Convex combination of completed summaries: ``(u, beta)``.

    With no completed blocks, u is zero (and beta is None).  The summary
    norm never exceeds the largest summary norm.
    """
    rank = params.q_cur.shape[1]
    if len(summaries) == 0:
        return np.zeros((q0.shape[0], rank)), None
    xi = depth_logits_rows(params, q0, summaries)
    beta = numerics.softmax_rows(xi)
    stack = np.stack(summaries, axis=1)  # (batch, completed, rank)
    return np.einsum("bi,bir->br", beta, stack), beta


def depth_logits(params: RouterParams, q0: np.ndarray, ctx: DepthContext) -> np.ndarray:
    q0 = np.asarray(q0, dtype=np.float64)
    rows = [s[None, :] if s.ndim == 1 else s for s in ctx.summaries]
    return depth_logits_rows(params, q0[None, :], rows)[0]


def depth_summary(params: RouterParams, q0: np.ndarray, ctx: DepthContext) -> np.ndarray:
    q0 = np.asarray(q0, dtype=np.float64)
    rows = [s[None, :] if s.ndim == 1 else s for s in ctx.summaries]
    u, _ = depth_summary_rows(params, q0[None, :], rows)
    return u[0]


# ---------------------------------------------------------------------------
# Query construction
# ---------------------------------------------------------------------------


def prequery_rows(params: RouterParams, prior_w: np.ndarray, s_entry: np.ndarray,
                  instr: Instruction | None) -> np.ndarray:
    """q0 = w + Q_cur s_entry (+ lambda_ctx Q_ctx e when instructed)."""
    q0 = prior_w[None, :] + s_entry @ params.q_cur.T
    if instr is not None and params.lambda_ctx != 0.0:
        q0 = q0 + params.lambda_ctx * (params.q_ctx @ instr.embedding)[None, :]
    return q0


def build_query_rows(params: RouterParams, prior_w: np.ndarray, s_entry: np.ndarray,
                     instr: Instruction | None, summaries):
    """Final block query: ``(q, q0, u, beta)`` for a batch of entry states."""
    q0 = prequery_rows(params, prior_w, s_entry, instr)
    u, beta = depth_summary_rows(params, q0, summaries)
    return q0 + u @ params.q_dep.T, q0, u, beta


def build_query(params: RouterParams, prior_w: np.ndarray, s_entry: np.ndarray,
                instr: Instruction | None, ctx: DepthContext) -> np.ndarray:
    s_entry = np.asarray(s_entry, dtype=np.float64)
    rows = [s[None, :] if s.ndim == 1 else s for s in ctx.summaries]
    q, _, _, _ = build_query_rows(params, np.asarray(prior_w, dtype=np.float64),
                                  s_entry[None, :], instr, rows)
    return q[0]
