"""Micro-benchmark comparing the compiled and reference kernel backends.

Run with ``python -m rankmem.kernels.bench``.  Times the four stack kernels
on the deep-narrow benchmark geometry (batch 64, width 32, rank 8, 7-layer
interior stacks) and reports the per-call time of each backend plus the
speedup.  Exits cleanly with a note if the extension is not built.
"""

from __future__ import annotations

import timeit

import numpy as np

from . import reference

try:
    from . import _core
except ImportError:
    _core = None


def _inputs(batch=64, width=32, rank=8, layers=7, seed=0):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((batch, width))
    w = rng.standard_normal((layers, width, width)) / np.sqrt(width)
    wt = np.ascontiguousarray(w.transpose(0, 2, 1))
    bias = rng.standard_normal((layers, width)) * 0.1
    a = rng.standard_normal((layers, rank, width)) / np.sqrt(width)
    at = np.ascontiguousarray(a.transpose(0, 2, 1))
    bm = rng.standard_normal((layers, width, rank)) / np.sqrt(rank)
    bmt = np.ascontiguousarray(bm.transpose(0, 2, 1))
    g = rng.uniform(0.05, 0.3, layers)
    s_op = rng.standard_normal((batch, rank, rank)) / np.sqrt(rank)
    d_out = rng.standard_normal((batch, width))
    ds_extra = rng.standard_normal((batch, rank)) * 0.01
    return h, w, wt, bias, a, at, bm, bmt, g, s_op, d_out, ds_extra


def _time(fn, number: int) -> float:
    return timeit.timeit(fn, number=number) / number


def run(number: int = 200) -> list[tuple[str, float, float | None]]:
    h, w, wt, bias, a, at, bm, bmt, g, s_op, d_out, ds_extra = _inputs()
    acts, pre, sig, s_st, d_st, t_st = reference.adapter_block_forward(h, wt, bias, at, bmt, g, s_op, 2.0)
    macts, mpre, msig = reference.mlp_stack_forward(h, wt, bias)

    cases = {
        "mlp_stack_forward": (
            lambda m: lambda: m.mlp_stack_forward(h, wt, bias)
        ),
        "mlp_stack_backward": (
            lambda m: lambda: m.mlp_stack_backward(d_out, macts, mpre, msig, w)
        ),
        "adapter_block_forward": (
            lambda m: lambda: m.adapter_block_forward(h, wt, bias, at, bmt, g, s_op, 2.0)
        ),
        "adapter_block_backward": (
            lambda m: lambda: m.adapter_block_backward(
                d_out, acts, pre, sig, s_st, d_st, t_st, w, a, bm, g, s_op, 2.0, ds_extra
            )
        ),
    }
    rows = []
    for name, make in cases.items():
        t_ref = _time(make(reference), number)
        t_c = _time(make(_core), number) if _core is not None else None
        rows.append((name, t_ref, t_c))
    return rows


def main() -> None:
    rows = run()
    print(f"{'kernel':<26} {'reference':>12} {'compiled':>12} {'speedup':>9}")
    for name, t_ref, t_c in rows:
        if t_c is None:
            print(f"{name:<26} {t_ref * 1e6:>10.1f}us {'n/a':>12} {'n/a':>9}")
        else:
            print(f"{name:<26} {t_ref * 1e6:>10.1f}us {t_c * 1e6:>10.1f}us {t_ref / t_c:>8.1f}x")
    if _core is None:
        print("compiled backend not built; install with a C toolchain to compare")


if __name__ == "__main__":
    main()
