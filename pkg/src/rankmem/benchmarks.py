"""Synthetic non-convex regression benchmark.

Nine two-dimensional stochastic targets with their conventional domain
boxes, a source-to-target shift (per-coefficient rescaling of the
nonlinear terms plus an input rotation about the box center), noisy
dataset generation, and the two-method head-to-head protocol: pretrain a
backbone on the source function, freeze it, then adapt with either the
queryable adapter or plain static low-rank adaptation on the shifted
target.

"sincos" is f(x1, x2) = sin(f1 x1) * cos(f2 x2) on [-pi, pi]^2; the other
eight follow the standard simulation-benchmark definitions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from rankmem import seeding
from rankmem.model import Backbone, Model, ModelConfig
from rankmem.router import Instruction
from rankmem.training import (DataBundle, RunReport, StageData, TrainSchedule,
                              posttrain, pretrain, train)

_LANGERMANN_A = np.array([[3.0, 5.0], [5.0, 2.0], [2.0, 1.0], [1.0, 4.0], [7.0, 9.0]])
_LANGERMANN_C = np.array([1.0, 2.0, 5.0, 2.0, 3.0])


def _ackley(x1, x2, p):
    mean_sq = 0.5 * (x1 * x1 + x2 * x2)
    mean_cos = 0.5 * (np.cos(p["freq"] * x1) + np.cos(p["freq"] * x2))
    return (-p["amp"] * np.exp(-p["decay"] * np.sqrt(mean_sq))
            - np.exp(mean_cos) + p["amp"] + math.e)


def _dropwave(x1, x2, p):
    r_sq = x1 * x1 + x2 * x2
    return -(1.0 + np.cos(p["freq"] * np.sqrt(r_sq))) / (p["decay"] * r_sq + p["shift"])


def _langermann(x1, x2, p):
    d = (x1[:, None] - _LANGERMANN_A[:, 0]) ** 2 + (x2[:, None] - _LANGERMANN_A[:, 1]) ** 2
    terms = p["amp"] * _LANGERMANN_C * np.exp(-d / np.pi) * np.cos(p["freq"] * np.pi * d)
    return terms.sum(axis=1)


def _levy(x1, x2, p):
    w1 = 1.0 + (x1 - 1.0) / 4.0
    w2 = 1.0 + (x2 - 1.0) / 4.0
    pi_f = np.pi * p["freq"]
    return (np.sin(pi_f * w1) ** 2
            + (w1 - 1.0) ** 2 * (1.0 + p["amp"] * np.sin(pi_f * w1 + 1.0) ** 2)
            + (w2 - 1.0) ** 2 * (1.0 + np.sin(2.0 * pi_f * w2) ** 2))


def _matyas(x1, x2, p):
    return p["c_sq"] * (x1 * x1 + x2 * x2) - p["c_cross"] * x1 * x2


def _michalewicz(x1, x2, p):
    out = np.zeros_like(x1)
    for i, xi in enumerate((x1, x2), start=1):
        out -= np.sin(xi) * np.sin(p["freq"] * i * xi * xi / np.pi) ** (2 * int(p["m"]))
    return out


def _rastrigin(x1, x2, p):
    out = 2.0 * p["amp"]
    for xi in (x1, x2):
        out = out + xi * xi - p["amp"] * np.cos(p["freq"] * xi)
    return out


def _sincos(x1, x2, p):
    return p["amp"] * np.sin(p["f1"] * x1) * np.cos(p["f2"] * x2)


def _styblinski_tang(x1, x2, p):
    out = np.zeros_like(x1)
    for xi in (x1, x2):
        out = out + xi**4 - p["c2"] * xi * xi + p["c1"] * xi
    return 0.5 * out


_REGISTRY = {
    "ackley": (_ackley, (-32.768, 32.768), {"amp": 20.0, "decay": 0.2, "freq": 2 * np.pi}),
    "dropwave": (_dropwave, (-5.12, 5.12), {"freq": 12.0, "decay": 0.5, "shift": 2.0}),
    "langermann": (_langermann, (0.0, 10.0), {"amp": 1.0, "freq": 1.0}),
    "levy": (_levy, (-10.0, 10.0), {"freq": 1.0, "amp": 10.0}),
    "matyas": (_matyas, (-10.0, 10.0), {"c_sq": 0.26, "c_cross": 0.48}),
    "michalewicz": (_michalewicz, (0.0, np.pi), {"m": 10.0, "freq": 1.0}),
    "rastrigin": (_rastrigin, (-5.12, 5.12), {"amp": 10.0, "freq": 2 * np.pi}),
    "sincos": (_sincos, (-np.pi, np.pi), {"amp": 1.0, "f1": 1.0, "f2": 1.0}),
    "styblinski_tang": (_styblinski_tang, (-5.0, 5.0), {"c2": 16.0, "c1": 5.0}),
}

FUNCTION_NAMES = tuple(sorted(_REGISTRY))


@dataclass(frozen=True)
class BenchFn:
    """A 2-D target: formula name, domain box, coefficient set, rotation."""

    name: str
    box: tuple[tuple[float, float], tuple[float, float]]
    params: dict
    rotation: float = 0.0

    def value(self, x: np.ndarray) -> np.ndarray:
        """Noiseless values at (N, 2) points (no box check; analytic formula)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.rotation != 0.0:
            cx = 0.5 * (self.box[0][0] + self.box[0][1])
            cy = 0.5 * (self.box[1][0] + self.box[1][1])
            cos_t, sin_t = math.cos(self.rotation), math.sin(self.rotation)
            dx, dy = x[:, 0] - cx, x[:, 1] - cy
            x = np.stack([cx + cos_t * dx - sin_t * dy,
                          cy + sin_t * dx + cos_t * dy], axis=1)
        formula = _REGISTRY[self.name][0]
        return formula(x[:, 0], x[:, 1], self.params)


def get_function(name: str) -> BenchFn:
    key = name.lower().replace("-", "_")
    if key not in _REGISTRY:
        raise KeyError(f"unknown benchmark function {name!r}; "
                       f"choose from {', '.join(FUNCTION_NAMES)}")
    _, (lo, hi), params = _REGISTRY[key]
    return BenchFn(name=key, box=((lo, hi), (lo, hi)), params=dict(params))


def eval_fn(fn: BenchFn, x: np.ndarray) -> np.ndarray | float:
    """Evaluate inside the domain box; out-of-box points are an error."""
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    for dim in range(2):
        lo, hi = fn.box[dim]
        if np.any(arr[:, dim] < lo) or np.any(arr[:, dim] > hi):
            raise ValueError(f"input outside the {fn.name} domain box")
    out = fn.value(arr)
    return float(out[0]) if np.asarray(x).ndim == 1 else out


@dataclass(frozen=True)
class ShiftSpec:
    """Coefficient rescaling per nonlinear term plus an input rotation."""

    coeff_scales: dict = field(default_factory=dict)
    theta: float = 0.0
    seed: int | None = None

    @classmethod
    def draw(cls, fn: BenchFn, seed: int, lo: float = 0.7, hi: float = 1.3,
             theta: float = np.pi / 6) -> "ShiftSpec":
        scales = {
            key: float(seeding.rng(seed, "shift", fn.name, key).uniform(lo, hi))
            for key in fn.params
        }
        return cls(coeff_scales=scales, theta=theta, seed=seed)

    def describe(self) -> dict:
        return {"coeff_scales": dict(self.coeff_scales), "theta": self.theta,
                "seed": self.seed}


def apply_shift(fn: BenchFn, spec: ShiftSpec) -> BenchFn:
    for key, scale in spec.coeff_scales.items():
        if key not in fn.params:
            raise KeyError(f"{fn.name} has no coefficient {key!r}")
        if scale <= 0:
            raise ValueError("coefficient scales must be positive")
    params = {k: v * spec.coeff_scales.get(k, 1.0) for k, v in fn.params.items()}
    return replace(fn, params=params, rotation=fn.rotation + spec.theta)


@dataclass
class Dataset:
    x: np.ndarray  # (N, 2)
    y: np.ndarray  # (N,)
    meta: dict = field(default_factory=dict)


def gen_dataset(fn: BenchFn, shift: ShiftSpec | None, n: int, noise_sd: float,
                seed: int) -> Dataset:
    """Uniform inputs over the box, targets from the (shifted) function plus
    Gaussian noise.  Deterministic per seed."""
    if n <= 0:
        raise ValueError("need n > 0")
    target = apply_shift(fn, shift) if shift is not None else fn
    rng_x = seeding.rng(seed, "data", fn.name, "inputs")
    lo = np.array([fn.box[0][0], fn.box[1][0]])
    hi = np.array([fn.box[0][1], fn.box[1][1]])
    x = rng_x.uniform(lo, hi, size=(n, 2))
    clean = target.value(x)
    noise = seeding.rng(seed, "data", fn.name, "noise").normal(0.0, noise_sd, size=n) \
        if noise_sd > 0 else np.zeros(n)
    meta = {"function": fn.name, "n": n, "noise_sd": noise_sd, "seed": seed,
            "shift": shift.describe() if shift is not None else None}
    return Dataset(x=x, y=clean + noise, meta=meta)


# ---------------------------------------------------------------------------
# Protocol
# ---------------------------------------------------------------------------


@dataclass
class ProtocolConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    n_source: int = 3000
    n_target: int = 1200
    n_adapt: int = 400
    source_train_frac: float = 0.8
    noise_sd: float = 0.05
    shift_theta: float = np.pi / 6
    shift_lo: float = 0.7
    shift_hi: float = 1.3
    use_instruction: bool = False


def _standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean) / std


def make_bundle(fn_name: str, pcfg: ProtocolConfig, seed: int) -> tuple[DataBundle, dict]:
    """Source/target stage data with inputs z-scored on source-train stats."""
    fn = get_function(fn_name)
    source = gen_dataset(fn, None, pcfg.n_source, pcfg.noise_sd, seed)
    shift = ShiftSpec.draw(fn, seed, pcfg.shift_lo, pcfg.shift_hi, pcfg.shift_theta)
    target = gen_dataset(fn, shift, pcfg.n_target, pcfg.noise_sd, seed + 1)

    n_train = int(round(pcfg.source_train_frac * pcfg.n_source))
    mean = source.x[:n_train].mean(axis=0)
    std = source.x[:n_train].std(axis=0)
    std[std == 0] = 1.0

    def stage(x, y, split):
        return StageData(train_x=_standardize(x[:split], mean, std),
                         train_y=y[:split, None],
                         test_x=_standardize(x[split:], mean, std),
                         test_y=y[split:, None])

    bundle = DataBundle(source=stage(source.x, source.y, n_train),
                        target=stage(target.x, target.y, pcfg.n_adapt))
    meta = {"function": fn_name, "seed": seed, "shift": shift.describe(),
            "standardize_mean": mean.tolist(), "standardize_std": std.tolist()}
    return bundle, meta


def pretrain_backbone(fn_name: str, pcfg: ProtocolConfig, seed: int) -> tuple[Backbone, DataBundle, dict]:
    """Stage-1 backbone shared by every method on the same (function, seed)."""
    bundle, meta = make_bundle(fn_name, pcfg, seed)
    backbone = Backbone(pcfg.model, seed)
    schedule = replace(pcfg.schedule, seed=seed)
    meta["pretrain"] = pretrain(backbone, bundle.source, schedule)
    backbone.freeze()
    return backbone, bundle, meta


def run_single(fn_name: str, method: str, seed: int, pcfg: ProtocolConfig,
               backbone: Backbone | None = None,
               bundle: DataBundle | None = None) -> RunReport:
    """One (function, method, seed) cell of the protocol."""
    cfg = pcfg.model.with_updates(method=method)
    if backbone is None or bundle is None:
        backbone, bundle, pre_meta = pretrain_backbone(fn_name, pcfg, seed)
    else:
        pre_meta = None
    model = Model(cfg, seed, backbone=backbone)
    schedule = replace(pcfg.schedule, seed=seed)
    instr = None
    if pcfg.use_instruction and method == "queryable":
        instr = Instruction.from_text(f"adapt to the shifted {fn_name} target",
                                      cfg.d_ctx, seed=0)
    report = RunReport(config=cfg.__dict__.copy(), method=method, seed=seed)
    report.config["function"] = fn_name
    if pre_meta is not None:
        report.pretrain = pre_meta["pretrain"]
    report.post = posttrain(model, bundle.target, schedule, instr=instr)
    report.diverged = report.post["diverged"]
    finite = [v for v in report.post["train_mse"] if math.isfinite(v)]
    if finite:
        report.best_train_mse = min(finite)
    finite = [v for v in report.post["test_mse"] if math.isfinite(v)]
    if finite:
        report.best_test_mse = min(finite)
    return report


def cell_value(report: RunReport, split: str) -> float:
    """Table cell for one run; diverged runs contribute the inf sentinel."""
    if report.diverged:
        return math.inf
    return report.best_train_mse if split == "train" else report.best_test_mse


@dataclass
class BenchmarkTable:
    rows: list[dict]
    reports: list[RunReport]

    def csv_rows(self, split: str) -> list[dict]:
        return [
            {"function": r["function"], "method": r["method"],
             "mean": r[f"{split}_mean"], "sd": r[f"{split}_sd"]}
            for r in self.rows
        ]


def run_protocol(pcfg: ProtocolConfig, functions: list[str], methods: list[str],
                 seeds: list[int], progress=None) -> BenchmarkTable:
    """Head-to-head over (function, method, seed); the pretrained backbone is
    shared across methods within one (function, seed)."""
    rows, reports = [], []
    cells: dict[tuple[str, str], dict[str, list[float]]] = {}
    for fn_name in functions:
        for seed in seeds:
            backbone, bundle, _meta = pretrain_backbone(fn_name, pcfg, seed)
            for method in methods:
                report = run_single(fn_name, method, seed, pcfg,
                                    backbone=backbone, bundle=bundle)
                reports.append(report)
                entry = cells.setdefault((fn_name, method), {"train": [], "test": []})
                entry["train"].append(cell_value(report, "train"))
                entry["test"].append(cell_value(report, "test"))
                if progress is not None:
                    progress(fn_name, method, seed, report)
    for (fn_name, method), entry in cells.items():
        row = {"function": fn_name, "method": method, "seeds": len(entry["train"])}
        for split in ("train", "test"):
            vals = np.array(entry[split])
            row[f"{split}_mean"] = float(vals.mean())
            row[f"{split}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            row[f"{split}_values"] = entry[split]
        rows.append(row)
    rows.sort(key=lambda r: (r["function"], r["method"]))
    return BenchmarkTable(rows=rows, reports=reports)


# ---------------------------------------------------------------------------
# Capacity sweep
# ---------------------------------------------------------------------------


def run_sweep(pcfg: ProtocolConfig, grid_r: list[int], grid_m: list[int],
              grid_k: list[int], functions: list[str], seeds: list[int]) -> list[dict]:
    """Grid over (rank, atoms, k_active), skipping invalid k > atoms; emits
    parameter-count / MSE rows with non-dominated flags."""
    rows = []
    for rank in grid_r:
        for atoms in grid_m:
            for k in grid_k:
                if k > atoms:
                    continue
                cfg = pcfg.model.with_updates(rank=rank, atoms=atoms, k_active=k)
                sub = replace(pcfg, model=cfg)
                table = run_protocol(sub, functions, ["queryable"], seeds)
                params = Model(cfg, seeds[0]).count_trainable()
                test_vals = [row["test_mean"] for row in table.rows]
                train_vals = [row["train_mean"] for row in table.rows]
                rows.append({
                    "rank": rank, "atoms": atoms, "k_active": k,
                    "trainable_params": params,
                    "train_mse": float(np.mean(train_vals)),
                    "test_mse": float(np.mean(test_vals)),
                })
    for row in rows:
        row["dominated"] = any(
            other["trainable_params"] < row["trainable_params"]
            and other["test_mse"] < row["test_mse"]
            for other in rows
        )
    return rows
