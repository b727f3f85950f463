"""Global atom bank and the instruction-regularized router.

The bank holds M rank-space atoms (r x r matrices) with matching routing
keys.  A block query is scored against the normalized keys to give state
logits; an optional instruction embedding induces a language prior over
atoms whose log is added to the logits; top-k softmax over the fused
logits yields routing weights, and the routed operator is the resulting
convex combination of atoms.

Functions taking a single query have ``*_rows`` twins operating on a
(batch, d) stack of queries; both share the same formula, and ``route`` is
the batch-of-one case of the engine path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rankmem import numerics, seeding
from rankmem.numerics import DEFAULT_EPS


@dataclass
class AtomBank:
    """Shared memory of rank-space atoms ``atoms[m]`` with keys ``keys[m]``."""

    atoms: np.ndarray  # (M, r, r)
    keys: np.ndarray   # (M, d_key)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.atoms.ndim != 3 or self.atoms.shape[1] != self.atoms.shape[2]:
            raise ValueError("atoms must be (M, r, r)")
        if self.keys.ndim != 2 or self.keys.shape[0] != self.atoms.shape[0]:
            raise ValueError("keys must be (M, d_key)")

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def rank(self) -> int:
        return self.atoms.shape[1]

    @property
    def d_key(self) -> int:
        return self.keys.shape[1]

    @classmethod
    def init_random(cls, m: int, rank: int, d_key: int, seed: int) -> "AtomBank":
        """Gaussian atoms scaled by 1/sqrt(rank), clipped to spectral norm 1;
        unit-norm random keys."""
        atoms = np.empty((m, rank, rank))
        keys = np.empty((m, d_key))
        for i in range(m):
            c = seeding.rng(seed, "bank", "atom", i).standard_normal((rank, rank))
            c /= np.sqrt(rank)
            top = numerics.spectral_norm(c)
            if top > 1.0:
                c /= top
            atoms[i] = c
            k = seeding.rng(seed, "bank", "key", i).standard_normal(d_key)
            keys[i] = k / np.linalg.norm(k)
        return cls(atoms, keys, meta={"seed": seed, "init": "gauss-clipped"})

    def max_operator_norm(self) -> float:
        return max(numerics.spectral_norm(c) for c in self.atoms)

    def project_operator_norms(self, radius: float = 1.0) -> None:
        """Clip every atom to spectral norm <= radius (optional trainer hook)."""
        for i in range(self.size):
            top = numerics.spectral_norm(self.atoms[i])
            if top > radius:
                self.atoms[i] *= radius / top


@dataclass
class RouterParams:
    """Projections, temperatures, and mixing strengths of the router."""

    q_cur: np.ndarray    # (d_key, rank)
    q_dep: np.ndarray    # (d_key, rank)
    q_ctx: np.ndarray    # (d_key, d_ctx)
    r_ctx: np.ndarray    # (d_key, d_ctx)
    q_dep_q: np.ndarray  # (d_key, d_key)
    q_dep_k: np.ndarray  # (d_key, rank)
    layer_priors: np.ndarray  # (n_blocks, d_key)
    t_attn: float = 1.0
    t_lang: float = 1.0
    t_dep: float = 1.0
    tau_lang: float = 0.0
    lambda_ctx: float = 0.0
    k_active: int = 2
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        for name in ("t_attn", "t_lang", "t_dep"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.tau_lang < 0 or self.lambda_ctx < 0:
            raise ValueError("tau_lang and lambda_ctx must be >= 0")

    @property
    def d_key(self) -> int:
        return self.q_cur.shape[0]


@dataclass
class Instruction:
    """Instruction text with its frozen embedding.

    Embeddings come from a deterministic pseudo-embedder: a fixed-norm
    Gaussian vector seeded by the text (and an embedder seed), standing in
    for a frozen text encoder.
    """

    text: str
    embedding: np.ndarray

    @classmethod
    def from_text(cls, text: str, dim: int, seed: int = 0, scale: float = 1.0) -> "Instruction":
        vec = seeding.rng(seed, "instruction", text).standard_normal(dim)
        vec *= scale / np.linalg.norm(vec)
        return cls(text=text, embedding=vec)


@dataclass
class RouteResult:
    """One block's routing decision."""

    query: np.ndarray        # (d_key,)
    zeta: np.ndarray         # (M,) state logits
    rho: np.ndarray | None   # (M,) language logits, None without instruction
    prior: np.ndarray | None  # (M,) language prior
    fused: np.ndarray        # (M,)
    active_set: np.ndarray   # (k,) int
    alpha: np.ndarray        # (M,) zero off the active set
    operator: np.ndarray     # (r, r) routed operator
    tau_lang: float

    def check(self, bank: AtomBank, tol: float = 1e-12) -> None:
        numerics.check_simplex(self.alpha, tol=1e-9)
        rebuilt = np.einsum("m,mij->ij", self.alpha, bank.atoms)
        if np.max(np.abs(rebuilt - self.operator)) > tol:
            raise AssertionError("operator does not match alpha-weighted atoms")


# ---------------------------------------------------------------------------
# Logits and priors
# ---------------------------------------------------------------------------


def normalized_keys(bank: AtomBank, eps: float = DEFAULT_EPS) -> np.ndarray:
    return numerics.rmsnorm_rows(bank.keys, eps)


def language_logits(bank: AtomBank, params: RouterParams, instr: Instruction) -> np.ndarray:
    e = np.asarray(instr.embedding, dtype=np.float64)
    if e.shape[0] != params.r_ctx.shape[1]:
        raise ValueError("instruction embedding does not match r_ctx input dim")
    ctx = numerics.rmsnorm(params.r_ctx @ e, params.eps)
    khat = normalized_keys(bank, params.eps)
    return khat @ ctx / (np.sqrt(bank.d_key) * params.t_lang)


def language_prior(bank: AtomBank, params: RouterParams, instr: Instruction) -> np.ndarray:
    """Softmax over key/instruction match scores; a simplex over atoms."""
    return numerics.softmax(language_logits(bank, params, instr))


def state_logits_rows(bank: AtomBank, params: RouterParams, queries: np.ndarray) -> np.ndarray:
    """State logits for a (batch, d_key) stack of queries -> (batch, M)."""
    qhat = numerics.rmsnorm_rows(queries, params.eps)
    khat = normalized_keys(bank, params.eps)
    return qhat @ khat.T / (np.sqrt(bank.d_key) * params.t_attn)


def state_logits(bank: AtomBank, params: RouterParams, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[0] != bank.d_key:
        raise ValueError("query does not match key dimension")
    return state_logits_rows(bank, params, q[None, :])[0]


def fuse_logits(zeta: np.ndarray, prior: np.ndarray, tau_lang: float) -> np.ndarray:
    """zeta + tau_lang * log(prior); identity at tau_lang = 0."""
    zeta = np.asarray(zeta, dtype=np.float64)
    if tau_lang == 0.0:
        return zeta.copy()
    prior = numerics.check_simplex(np.asarray(prior, dtype=np.float64), tol=1e-9)
    if prior.shape != zeta.shape:
        raise ValueError("dimension mismatch")
    if np.any(prior == 0.0):
        raise ValueError("prior support: zero prior entry with tau_lang > 0")
    return zeta + tau_lang * np.log(prior)


def route(bank: AtomBank, params: RouterParams, q: np.ndarray,
          instr: Instruction | None = None) -> RouteResult:
    """Full routing decision for one query.

    Without an instruction the language term is skipped entirely; by the
    shift invariance of (top-k) softmax this routes identically to fusing
    a uniform prior.
    """
    zeta = state_logits(bank, params, q)
    rho = prior = None
    if instr is not None and params.tau_lang > 0.0:
        rho = language_logits(bank, params, instr)
        prior = numerics.softmax(rho)
        fused = fuse_logits(zeta, prior, params.tau_lang)
    elif instr is not None:
        rho = language_logits(bank, params, instr)
        prior = numerics.softmax(rho)
        fused = zeta.copy()
    else:
        fused = zeta.copy()
    active, alpha = numerics.topk_softmax(fused, params.k_active)
    operator = np.einsum("m,mij->ij", alpha, bank.atoms)
    return RouteResult(
        query=np.asarray(q, dtype=np.float64).copy(), zeta=zeta, rho=rho, prior=prior,
        fused=fused, active_set=active, alpha=alpha, operator=operator,
        tau_lang=params.tau_lang,
    )


# ---------------------------------------------------------------------------
# Variational view of the router
# ---------------------------------------------------------------------------


def tempered_prior(prior_i: np.ndarray, tau_lang: float) -> np.ndarray:
    """prior^tau renormalized: identity at tau=1, uniform at tau=0."""
    prior_i = numerics.check_simplex(np.asarray(prior_i, dtype=np.float64), tol=1e-9)
    if tau_lang == 0.0:
        return np.full(prior_i.size, 1.0 / prior_i.size)
    if np.any(prior_i == 0.0):
        raise ValueError("prior support: zero entry with tau_lang > 0")
    w = prior_i**tau_lang
    return w / w.sum()


def variational_objective(a: np.ndarray, zeta_i: np.ndarray, pi: np.ndarray) -> float:
    """<a, zeta_i> - KL(a || pi), the quantity the router maximizes."""
    return float(a @ zeta_i) - numerics.kl_div(a, pi)


def variational_oracle(zeta_i: np.ndarray, prior_i: np.ndarray, tau_lang: float,
                       step: float = 0.5, max_iter: int = 10000,
                       tol: float = 1e-12) -> np.ndarray:
    """Numerically maximize the routing objective over the simplex.

    Multiplicative-weights (mirror) ascent on <a, zeta> - KL(a || pi^tau),
    stopping when the objective improves by less than ``tol``.  Independent
    of the closed-form router; used to certify it.
    """
    zeta_i = np.asarray(zeta_i, dtype=np.float64)
    pi = tempered_prior(prior_i, tau_lang)
    a = np.full(zeta_i.size, 1.0 / zeta_i.size)
    obj = variational_objective(a, zeta_i, pi)
    for _ in range(max_iter):
        grad = zeta_i - np.log(a / pi) - 1.0
        new_a = a * np.exp(step * grad)
        new_a /= new_a.sum()
        new_obj = variational_objective(new_a, zeta_i, pi)
        moved = float(np.max(np.abs(new_a - a)))
        a, obj_change = new_a, abs(new_obj - obj)
        obj = new_obj
        # iterate-change guard keeps the maximizer itself converged, not
        # just the objective value
        if obj_change < tol and moved < 1e-9:
            return a
    raise RuntimeError(
        f"variational oracle did not converge; final objective change {obj_change:.3e}"
    )


def tradeoff_gap(result: RouteResult) -> tuple[float, float]:
    """State-utility gap of the routed weights and its prior-mass bound.

    gap = max_I zeta - <alpha, zeta> over the active set; the bound is
    -log of the tempered prior mass at the state-argmax atom.  Asserts
    0 <= gap <= bound + 1e-9.
    """
    idx = result.active_set
    zeta_i = result.zeta[idx]
    alpha_i = result.alpha[idx]
    if result.prior is not None and result.tau_lang > 0.0:
        pi = tempered_prior(result.prior[idx] / result.prior[idx].sum(), result.tau_lang)
    else:
        pi = np.full(idx.size, 1.0 / idx.size)
    m_star = int(np.argmax(zeta_i))
    gap = float(zeta_i.max() - alpha_i @ zeta_i)
    bound = float(-np.log(pi[m_star]))
    if not (-1e-12 <= gap <= bound + 1e-9):
        raise AssertionError(f"tradeoff bound violated: gap={gap:.3e} bound={bound:.3e}")
    return gap, bound
