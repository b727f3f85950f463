"""Routing and optimization diagnostics.

Atom-usage rows (block-averaged routing mass per evaluation task), per-atom
usage entropy across tasks, symmetric-KL separation between tasks,
stagewise route drift under sequential training, and the per-layer
gradient-norm profile with its concentration index (max over mean).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from rankmem import benchmarks as bm
from rankmem import numerics as nx
from rankmem.model import Model, forward
from rankmem.router import Instruction
from rankmem.training import RunReport, posttrain

KL_SMOOTHING = 1e-8


def atom_usage(traces) -> np.ndarray:
    """Mean routing mass over traces, blocks, and examples; a simplex."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces")
    total = None
    count = 0
    for trace in traces:
        for bt in trace.blocks:
            if bt.alpha is None:
                raise ValueError("static traces carry no routing weights")
            block_mean = bt.alpha.mean(axis=0)
            total = block_mean if total is None else total + block_mean
            count += 1
    return total / count


@dataclass
class UsageMatrix:
    """Rows: task labels; columns: atoms; each row a routing simplex."""

    labels: list[str]
    rows: np.ndarray  # (tasks, atoms)

    def __post_init__(self):
        for row in self.rows:
            nx.check_simplex(row, tol=1e-9)


@dataclass
class DriftRecord:
    """Usage rows per (stage, evaluation task)."""

    stage_labels: list[str]
    task_labels: list[str]
    usage: np.ndarray  # (stages, tasks, atoms)


def _smoothed(row: np.ndarray) -> np.ndarray:
    out = row + KL_SMOOTHING
    return out / out.sum()


def _sym_kl(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _smoothed(a), _smoothed(b)
    return 0.5 * (nx.kl_div(a, b) + nx.kl_div(b, a))


def usage_entropy(usage: UsageMatrix) -> tuple[np.ndarray, list[bool]]:
    """Per-atom entropy of the task distribution of its usage.

    Columns are normalized across tasks; an all-zero column has entropy 0
    and is flagged.  Range [0, log(#tasks)].
    """
    if usage.rows.shape[0] < 2:
        raise ValueError("need at least two tasks")
    ent = np.zeros(usage.rows.shape[1])
    flagged = []
    for m in range(usage.rows.shape[1]):
        col = usage.rows[:, m]
        total = col.sum()
        if total == 0.0:
            flagged.append(True)
            continue
        flagged.append(False)
        ent[m] = nx.entropy(col / total)
    return ent, flagged


def symmetric_kl(usage: UsageMatrix) -> np.ndarray:
    """Pairwise symmetric KL between task usage rows (smoothed)."""
    n = usage.rows.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = _sym_kl(usage.rows[i], usage.rows[j])
    return out


def route_drift(record: DriftRecord) -> np.ndarray:
    """(stages-1, tasks) symmetric KL between consecutive-stage usage rows."""
    stages, tasks, _ = record.usage.shape
    out = np.zeros((stages - 1, tasks))
    for s in range(stages - 1):
        for t in range(tasks):
            out[s, t] = _sym_kl(record.usage[s, t], record.usage[s + 1, t])
    return out


def grad_profile(report: RunReport) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer gradient norms (epochs, layers) and the concentration index
    (max over mean) recomputed from the raw logged norms."""
    if report.post is None or not report.post.get("layer_grad_norms"):
        raise ValueError("report carries no logged gradient norms")
    norms = np.asarray(report.post["layer_grad_norms"], dtype=np.float64)
    means = norms.mean(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        conc = np.where(means > 0, norms.max(axis=1) / means, 1.0)
    return norms, conc


# ---------------------------------------------------------------------------
# Sequential (continual) protocol
# ---------------------------------------------------------------------------


@dataclass
class SequentialTask:
    name: str
    fn_name: str
    data_seed: int
    instruction: str | None = None


def _usage_row(model: Model, x: np.ndarray, instr: Instruction | None,
               batch_size: int = 256) -> np.ndarray:
    traces = []
    for start in range(0, x.shape[0], batch_size):
        _, trace = forward(model, x[start:start + batch_size], instr=instr)
        traces.append(trace)
    return atom_usage(traces)


def sequential_protocol(pcfg: bm.ProtocolConfig, tasks: list[SequentialTask],
                        seed: int) -> tuple[DriftRecord, list[dict]]:
    """Train one model through the task list without resetting adapters,
    router, gates, keys, or atoms; after each stage record every task's
    block-averaged atom usage on its held-out split.

    The backbone is pretrained once on the first task's source data.
    """
    if len(tasks) < 1:
        raise ValueError("need at least one task")
    backbone, first_bundle, _ = bm.pretrain_backbone(tasks[0].fn_name, pcfg, seed)
    model = Model(pcfg.model.with_updates(method="queryable"), seed, backbone=backbone)

    bundles = {}
    instrs = {}
    for i, task in enumerate(tasks):
        if i == 0:
            bundles[task.name] = first_bundle
        else:
            bundles[task.name], _ = bm.make_bundle(task.fn_name, pcfg,
                                                   seed + task.data_seed)
        instrs[task.name] = (Instruction.from_text(task.instruction, pcfg.model.d_ctx)
                             if task.instruction else None)

    usage = np.zeros((len(tasks), len(tasks), pcfg.model.atoms))
    metrics = []
    for stage, task in enumerate(tasks):
        schedule = replace(pcfg.schedule, seed=seed + stage)
        stage_post = posttrain(model, bundles[task.name].target, schedule,
                               instr=instrs[task.name])
        row_metrics = {"stage": stage, "trained_on": task.name,
                       "train_mse": stage_post["train_mse"][-1],
                       "diverged": stage_post["diverged"], "eval_mse": {}}
        for t, eval_task in enumerate(tasks):
            data = bundles[eval_task.name].target
            usage[stage, t] = _usage_row(model, data.test_x, instrs[eval_task.name])
            diff = []
            for start in range(0, data.test_x.shape[0], 256):
                pred, _ = forward(model, data.test_x[start:start + 256],
                                  instr=instrs[eval_task.name])
                diff.append(pred - data.test_y[start:start + 256].reshape(pred.shape))
            err = np.concatenate(diff)
            row_metrics["eval_mse"][eval_task.name] = float(np.mean(err * err))
        metrics.append(row_metrics)
    record = DriftRecord(stage_labels=[f"after-{t.name}" for t in tasks],
                         task_labels=[t.name for t in tasks], usage=usage)
    return record, metrics
