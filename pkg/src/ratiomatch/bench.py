"""Per-batch training-step timing of full ratio matching against the gradient-guided estimator."""
from __future__ import annotations

import gc
import os
import time
import tracemalloc
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .energy import MlpEnergy
from .objectives import EstimatorKind, EstimatorSpec, batch_loss
from .samplers import make_rng

DEFAULT_DIMS = (32, 64, 128, 256, 512, 1024, 2048)


@dataclass
class BenchRow:
    d: int
    rm_full_ms: float | None
    rmwggis_ms: float | None
    speedup: float | None
    rm_full_peak_mb: float | None
    rmwggis_peak_mb: float | None
    note: str = ""


def _step(model, X, spec, adam, rng, lr):
    lv = batch_loss(model, X, spec, rng=rng)
    grads = T.backward(lv.node, model.params)
    T.adam_step(model.params, grads, adam, lr)


def time_step(d: int, kind: EstimatorKind, batch: int = 256, s: int = 10, width: int = 256, depth: int = 3,
              warmup: int = 5, timed: int = 50, seed: int = 0, lr: float = 1e-3, measure_memory: bool = True):
    """Mean wall milliseconds of one full training step, and a best-effort peak allocation in MB."""
    rng = make_rng(seed, d)
    model = MlpEnergy(d, width, depth, rng=rng)
    X = rng.integers(0, 2, size=(batch, d)).astype(np.float64)
    spec = EstimatorSpec(kind, s=min(s, d))
    adam = T.AdamState()
    for _ in range(warmup):
        _step(model, X, spec, adam, rng, lr)
    times = []
    for _ in range(timed):
        t0 = time.perf_counter()
        _step(model, X, spec, adam, rng, lr)
        times.append(time.perf_counter() - t0)
    peak = None
    if measure_memory:
        # numpy registers its buffers with tracemalloc; this misses allocator slack
        gc.collect()
        tracemalloc.start()
        _step(model, X, spec, adam, rng, lr)
        peak = tracemalloc.get_traced_memory()[1] / 2**20
        tracemalloc.stop()
    return 1000.0 * float(np.mean(times)), peak


def estimated_step_bytes(flips: int, batch: int, width: int, depth: int) -> int:
    """Rough working set of one step: a few activations per layer over B(flips+1) rows."""
    return 5 * depth * batch * (flips + 1) * width * 8


def available_bytes() -> int | None:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return None


def run_bench(dims=DEFAULT_DIMS, batch: int = 256, s: int = 10, width: int = 256, depth: int = 3,
              warmup: int = 5, timed: int = 50, seed: int = 0, measure_memory: bool = True, progress=None):
    rows = []
    for d in dims:
        res, notes = {}, []
        for kind in (EstimatorKind.RM_FULL, EstimatorKind.RMWGGIS_ADVANCED):
            avail = available_bytes()
            flips = d if kind == EstimatorKind.RM_FULL else min(s, d)
            need = estimated_step_bytes(flips, batch, width, depth)
            if avail is not None and need > 0.8 * avail:
                # the OOM killer would end the process before MemoryError is raised
                res[kind] = (None, None)
                notes.append(f"{kind.value}: skipped, needs ~{need / 2**30:.1f} GiB")
                continue
            try:
                res[kind] = time_step(d, kind, batch, s, width, depth, warmup, timed, seed,
                                      measure_memory=measure_memory)
            except MemoryError:
                res[kind] = (None, None)
                notes.append(f"{kind.value}: out of memory")
            gc.collect()
        (rm, rm_mem), (gg, gg_mem) = res[EstimatorKind.RM_FULL], res[EstimatorKind.RMWGGIS_ADVANCED]
        row = BenchRow(d, rm, gg, rm / gg if rm and gg else None, rm_mem, gg_mem, "; ".join(notes))
        rows.append(row)
        if progress:
            progress(row)
    return rows


def _fmt(v, spec):
    return "-" if v is None else format(v, spec)


def format_table(rows) -> str:
    head = f"{'d':>6} {'rm-full ms':>12} {'rmwggis ms':>12} {'speedup':>8} {'rm MB*':>9} {'ggis MB*':>9}  note"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.d:>6} {_fmt(r.rm_full_ms, '12.2f')} {_fmt(r.rmwggis_ms, '12.2f')} "
                     f"{_fmt(r.speedup, '8.2f')} {_fmt(r.rm_full_peak_mb, '9.1f')} "
                     f"{_fmt(r.rmwggis_peak_mb, '9.1f')}  {r.note}")
    lines.append("* peak traced allocation during one step; best effort, not normative")
    return "\n".join(lines)


def rows_as_dicts(rows) -> list[dict]:
    return [asdict(r) for r in rows]
