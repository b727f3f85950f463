"""Command-line surface.

Subcommands: ``bench`` (head-to-head protocol), ``theory`` (bound and
gradient certification), ``sweep`` (rank/atoms/sparsity capacity grid),
``drift`` (sequential-task routing analytics), ``report`` (summarize an
output directory).  Configuration is layered: a named or file preset gives
defaults, flags override; the resolved configuration is echoed into every
output directory.  Unknown preset keys are rejected.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 theory
check failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from rankmem import analytics
from rankmem import benchmarks as bm
from rankmem import theory
from rankmem.model import ModelConfig
from rankmem.training import RunReport, TrainSchedule

PRESET_DIR = Path(__file__).parent / "presets"

_SECTION_FIELDS = {
    "model": {f.name for f in dataclasses.fields(ModelConfig)},
    "schedule": {f.name for f in dataclasses.fields(TrainSchedule)},
    "protocol": {"n_source", "n_target", "n_adapt", "source_train_frac", "noise_sd",
                 "shift_theta", "shift_lo", "shift_hi", "use_instruction"},
    "run": {"functions", "methods", "seeds"},
    "sweep": {"grid_r", "grid_m", "grid_k", "functions", "seeds"},
    "drift": {"tasks", "stage_epochs", "tau_lang", "lambda_ctx", "seeds"},
}


class ConfigError(Exception):
    pass


def load_preset(name_or_path: str) -> dict:
    path = Path(name_or_path)
    if not path.exists():
        path = PRESET_DIR / f"{name_or_path}.toml"
    if not path.exists():
        raise ConfigError(f"preset {name_or_path!r} not found "
                          f"(looked in {PRESET_DIR})")
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    for section, values in data.items():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"unknown config section [{section}] in {path}")
        unknown = set(values) - _SECTION_FIELDS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return data


def resolve(args) -> dict:
    config = load_preset(args.preset)
    run = config.setdefault("run", {})
    if getattr(args, "functions", None):
        run["functions"] = [f.strip() for f in args.functions.split(",") if f.strip()]
    if getattr(args, "method", None):
        run["methods"] = (["queryable", "lora"] if args.method == "both"
                          else [args.method])
    if getattr(args, "seeds", None):
        run["seeds"] = [int(s) for s in args.seeds.split(",")]
    if getattr(args, "post_epochs", None) is not None:
        config.setdefault("schedule", {})["post_epochs"] = args.post_epochs
    if getattr(args, "pre_epochs", None) is not None:
        config.setdefault("schedule", {})["pre_epochs"] = args.pre_epochs
    for fn in run.get("functions", []):
        bm.get_function(fn)  # rejects unknown functions early
    return config


def protocol_config(config: dict) -> bm.ProtocolConfig:
    model = ModelConfig(**config.get("model", {}))
    schedule = TrainSchedule(**config.get("schedule", {}))
    return bm.ProtocolConfig(model=model, schedule=schedule,
                             **config.get("protocol", {}))


def out_dir(args) -> Path:
    root = args.out or os.environ.get("RANKMEM_OUT", "rankmem-out")
    path = Path(root) / args.command
    path.mkdir(parents=True, exist_ok=True)
    return path


def echo_config(path: Path, config: dict, extra: dict | None = None) -> None:
    payload = dict(config)
    if extra:
        payload["invocation"] = extra
    with open(path / "resolved_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _bench_cell(payload):
    fn_name, method, seed, config = payload
    pcfg = protocol_config(config)
    report = bm.run_single(fn_name, method, seed, pcfg)
    return fn_name, method, seed, report.to_json()


def cmd_bench(args) -> int:
    config = resolve(args)
    pcfg = protocol_config(config)
    run = config.get("run", {})
    functions = run.get("functions", list(bm.FUNCTION_NAMES))
    methods = run.get("methods", ["queryable", "lora"])
    seeds = [int(s) for s in run.get("seeds", [0])]
    if args.dry_run:
        print(json.dumps(config, indent=2, sort_keys=True, default=str))
        return 0
    out = out_dir(args)
    echo_config(out, config, {"functions": functions, "methods": methods,
                              "seeds": seeds})
    reports_dir = out / "reports"
    reports_dir.mkdir(exist_ok=True)

    if args.jobs > 1:
        cells = [(fn, method, seed, config)
                 for fn in functions for seed in seeds for method in methods]
        results = []
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for fn, method, seed, text in pool.map(_bench_cell, cells):
                results.append((fn, method, seed, RunReport.from_json(text)))
        table = _aggregate(results)
        reports = [r for *_key, r in results]
    else:
        def progress(fn, method, seed, report):
            print(f"  {fn:<16} {method:<10} seed={seed} "
                  f"best_train={report.best_train_mse:.4g} "
                  f"best_test={report.best_test_mse:.4g}"
                  f"{'  [diverged]' if report.diverged else ''}")

        table = bm.run_protocol(pcfg, functions, methods, seeds, progress=progress)
        reports = table.reports

    for report in reports:
        fn = report.config.get("function", "run")
        name = f"{fn}_{report.method}_seed{report.seed}.json"
        (reports_dir / name).write_text(report.to_json() + "\n")
    for split in ("train", "test"):
        write_csv(out / f"bench_{split}.csv", table.csv_rows(split),
                  ["function", "method", "mean", "sd"])
    with open(out / "bench_table.json", "w") as fh:
        json.dump(table.rows, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    print(f"wrote {out}/bench_train.csv, bench_test.csv, "
          f"{len(reports)} run reports")
    return 0


def _aggregate(results) -> bm.BenchmarkTable:
    cells = {}
    reports = []
    for fn, method, _seed, report in results:
        reports.append(report)
        entry = cells.setdefault((fn, method), {"train": [], "test": []})
        entry["train"].append(bm.cell_value(report, "train"))
        entry["test"].append(bm.cell_value(report, "test"))
    rows = []
    for (fn, method), entry in sorted(cells.items()):
        row = {"function": fn, "method": method, "seeds": len(entry["train"])}
        for split in ("train", "test"):
            vals = np.array(entry[split])
            row[f"{split}_mean"] = float(vals.mean())
            row[f"{split}_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            row[f"{split}_values"] = entry[split]
        rows.append(row)
    return bm.BenchmarkTable(rows=rows, reports=reports)


def _json_default(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------


def cmd_theory(args) -> int:
    only = [s.strip() for s in args.only.split(",")] if args.only else None
    try:
        reports = theory.run_all(seed=args.seed, only=only, trials=args.trials)
    except KeyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = out_dir(args)
    echo_config(out, {"theory": {"seed": args.seed, "only": only,
                                 "trials": args.trials}})
    print("claim-to-check mapping:")
    wanted = set(r.name for r in reports)
    for claim, check in theory.CLAIM_MAP:
        if check in wanted:
            print(f"  {check:<12} <- {claim}")
    all_passed = True
    for report in reports:
        print(report.line())
        all_passed &= report.passed
    payload = [{**dataclasses.asdict(r)} for r in reports]
    with open(out / "theory_report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return 0 if all_passed else 3


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    config = resolve(args)
    sweep = config.get("sweep")
    if not sweep:
        print("error: preset has no [sweep] section", file=sys.stderr)
        return 2
    if args.dry_run:
        print(json.dumps(config, indent=2, sort_keys=True, default=str))
        return 0
    pcfg = protocol_config(config)
    rows = bm.run_sweep(pcfg, sweep["grid_r"], sweep["grid_m"], sweep["grid_k"],
                        sweep.get("functions", ["matyas"]),
                        [int(s) for s in sweep.get("seeds", [0])])
    out = out_dir(args)
    echo_config(out, config)
    write_csv(out / "sweep.csv", rows,
              ["rank", "atoms", "k_active", "trainable_params", "train_mse",
               "test_mse", "dominated"])
    frontier = sum(1 for r in rows if not r["dominated"])
    print(f"wrote {out}/sweep.csv ({len(rows)} settings, {frontier} non-dominated)")
    return 0


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------


def cmd_drift(args) -> int:
    config = resolve(args)
    drift_cfg = config.get("drift")
    if not drift_cfg:
        print("error: preset has no [drift] section", file=sys.stderr)
        return 2
    if args.dry_run:
        print(json.dumps(config, indent=2, sort_keys=True, default=str))
        return 0
    pcfg = protocol_config(config)
    pcfg = replace(pcfg, model=pcfg.model.with_updates(
        tau_lang=float(drift_cfg.get("tau_lang", 0.0)),
        lambda_ctx=float(drift_cfg.get("lambda_ctx", 0.0))))
    pcfg.schedule = replace(pcfg.schedule,
                            post_epochs=int(drift_cfg.get("stage_epochs",
                                                          pcfg.schedule.post_epochs)))
    tasks = [
        analytics.SequentialTask(name=f"{i}-{fn}", fn_name=fn, data_seed=17 * (i + 1),
                                 instruction=f"focus on the {fn} target")
        for i, fn in enumerate(drift_cfg["tasks"])
    ]
    seed = int(args.seed)
    record, metrics = analytics.sequential_protocol(pcfg, tasks, seed=seed)
    out = out_dir(args)
    echo_config(out, config, {"seed": seed})
    for s, label in enumerate(record.stage_labels):
        usage = analytics.UsageMatrix(labels=record.task_labels, rows=record.usage[s])
        rows = [{"task": t, **{f"atom{m}": usage.rows[i, m]
                               for m in range(usage.rows.shape[1])}}
                for i, t in enumerate(usage.labels)]
        write_csv(out / f"usage_stage{s}.csv", rows,
                  ["task"] + [f"atom{m}" for m in range(usage.rows.shape[1])])
    final = analytics.UsageMatrix(labels=record.task_labels, rows=record.usage[-1])
    kl = analytics.symmetric_kl(final)
    write_csv(out / "final_symmetric_kl.csv",
              [{"task": t, **{u: kl[i, j] for j, u in enumerate(record.task_labels)}}
               for i, t in enumerate(record.task_labels)],
              ["task"] + record.task_labels)
    drift = analytics.route_drift(record)
    write_csv(out / "stage_drift.csv",
              [{"transition": f"{record.stage_labels[s]}->{record.stage_labels[s+1]}",
                **{t: drift[s, j] for j, t in enumerate(record.task_labels)}}
               for s in range(drift.shape[0])],
              ["transition"] + record.task_labels)
    ent, flagged = analytics.usage_entropy(final)
    summary = {"metrics": metrics, "atom_entropy": ent.tolist(),
               "zero_usage_atoms": flagged,
               "max_stage_drift": float(drift.max()) if drift.size else 0.0}
    with open(out / "drift_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    print(f"wrote drift artifacts to {out}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    root = Path(args.out or os.environ.get("RANKMEM_OUT", "rankmem-out"))
    bench = root / "bench"
    if not bench.exists():
        print(f"error: no bench outputs under {root}", file=sys.stderr)
        return 2
    table_file = bench / "bench_table.json"
    rows = json.loads(table_file.read_text())
    print(f"{'function':<18} {'method':<10} {'train mean±sd':>24} {'test mean±sd':>24}")
    for row in rows:
        print(f"{row['function']:<18} {row['method']:<10} "
              f"{row['train_mean']:>12.4g} ±{row['train_sd']:<9.3g} "
              f"{row['test_mean']:>12.4g} ±{row['test_sd']:<9.3g}")
    wins = {}
    for row in rows:
        wins.setdefault(row["function"], {})[row["method"]] = row["train_mean"]
    both = [fn for fn, cell in wins.items() if {"queryable", "lora"} <= set(cell)]
    if both:
        better = sum(1 for fn in both if wins[fn]["queryable"] < wins[fn]["lora"])
        print(f"\nqueryable beats static low-rank on best train MSE: "
              f"{better}/{len(both)} functions")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankmem",
        description="Queryable rank-space update memory: benchmarks, theory "
                    "certification, capacity sweeps, and routing analytics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, preset_default=None):
        p.add_argument("--preset", default=preset_default,
                       help="preset name (smoke, deep-narrow, wide-shallow) or a TOML path")
        p.add_argument("--out", default=None,
                       help="output root (default $RANKMEM_OUT or ./rankmem-out)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--dry-run", action="store_true",
                       help="print the resolved config without computing")

    p_bench = sub.add_parser("bench", help="source-to-target benchmark protocol")
    common(p_bench, "smoke")
    p_bench.add_argument("--functions", default=None,
                         help="comma-separated target functions")
    p_bench.add_argument("--method", choices=["queryable", "lora", "both"], default=None)
    p_bench.add_argument("--seeds", default=None, help="comma-separated seeds")
    p_bench.add_argument("--post-epochs", type=int, default=None)
    p_bench.add_argument("--pre-epochs", type=int, default=None)
    p_bench.add_argument("--jobs", type=int, default=1,
                         help="parallel workers over (function, method, seed) runs")

    p_theory = sub.add_parser("theory", help="run the certification suite")
    p_theory.add_argument("--out", default=None)
    p_theory.add_argument("--seed", type=int, default=0)
    p_theory.add_argument("--trials", type=int, default=1000)
    p_theory.add_argument("--only", default=None,
                          help=f"comma-separated subset of {theory.CHECK_NAMES}")

    p_sweep = sub.add_parser("sweep", help="rank/atoms/sparsity capacity grid")
    common(p_sweep, "smoke")

    p_drift = sub.add_parser("drift", help="sequential-task routing analytics")
    common(p_drift, "smoke")

    p_report = sub.add_parser("report", help="summarize an output directory")
    p_report.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"bench": cmd_bench, "theory": cmd_theory, "sweep": cmd_sweep,
                "drift": cmd_drift, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
