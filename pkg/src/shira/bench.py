"""Switch-time benchmark: sparse indexed overwrite vs dense LoRA fusion.

Switching a LoRA adapter in means computing ``W + scale * A @ B`` over the
whole weight; switching a SHiRA adapter in means writing ``nnz`` values at
known flat indices. Both kernels are timed single-threaded on the same
weights, after checking that each produces the right result.
"""

from __future__ import annotations

import csv
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import NumericError, ParameterError

CSV_FIELDS = ("dim", "repeats", "t_fuse_mean", "t_fuse_std", "t_scatter_mean", "t_scatter_std", "speedup")
WARMUP = 3
MIN_RESOLVED = 1e-5  # below this a single sample is dominated by timer jitter


@contextmanager
def single_threaded():
    """Limit BLAS to one thread and pin to one CPU where possible.

    Yields whether CPU pinning succeeded.
    """
    pinned = False
    previous = None
    if hasattr(os, "sched_setaffinity"):
        try:
            previous = os.sched_getaffinity(0)
            os.sched_setaffinity(0, {min(previous)})
            pinned = True
        except OSError:
            pinned = False
    try:
        with threadpool_limits(limits=1):
            yield pinned
    finally:
        if pinned:
            os.sched_setaffinity(0, previous)


def sig3(x):
    """Round to three significant figures."""
    if x == 0 or not math.isfinite(x):
        return x
    return round(x, 2 - int(math.floor(math.log10(abs(x)))))


def median_of_means(samples, groups=5):
    chunks = np.array_split(np.asarray(samples), min(groups, len(samples)))
    return float(np.median([c.mean() for c in chunks]))


@dataclass
class BenchRow:
    dim: int
    repeats: int
    t_fuse_mean: float
    t_fuse_std: float
    t_scatter_mean: float
    t_scatter_std: float
    speedup: float
    t_fuse_mom: float = 0.0
    t_scatter_mom: float = 0.0
    low_resolution: bool = False


@dataclass
class BenchReport:
    density: float
    rank: int
    pinned: bool
    rows: list = field(default_factory=list)

    def get(self, dim):
        for r in self.rows:
            if r.dim == dim:
                return r
        raise KeyError(dim)

    @property
    def speedups(self):
        return [r.speedup for r in self.rows]

    @property
    def warnings(self):
        return [f"dim {r.dim}: timings near timer resolution" for r in self.rows if r.low_resolution]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for r in self.rows:
                w.writerow([getattr(r, f) for f in CSV_FIELDS])


def fuse_kernel(w, a, b, scale, out):
    """``out = w + scale * a @ b``."""
    np.matmul(a, b, out=out)
    if scale != 1.0:
        out *= scale
    out += w
    return out


def scatter_kernel(idx, values, out):
    """Write ``values`` at flat ``idx`` of the resident weight ``out``, in place."""
    if out.flags.c_contiguous:
        out.reshape(-1)[idx] = values  # a view; cheaper than np.put
    else:
        np.put(out, idx, values)
    return out


def _problem(dim, density, rank, rng):
    w = rng.standard_normal((dim, dim))
    a = rng.standard_normal((dim, rank))
    b = rng.standard_normal((rank, dim))
    k = int(round(density * dim * dim))
    idx = np.sort(rng.choice(dim * dim, size=k, replace=False))
    return w, a, b, idx, rng.standard_normal(k)


def _validate(w, a, b, scale, idx, values):
    out = np.empty_like(w)
    fused = fuse_kernel(w, a, b, scale, out)
    if np.abs(fused - (w + scale * (a @ b))).max() > 1e-12 * max(1.0, np.abs(fused).max()):
        raise NumericError("fuse kernel disagrees with reference matmul-add")
    out = scatter_kernel(idx, values, w.copy())
    touched = np.zeros(w.size, dtype=bool)
    touched[idx] = True
    flat = out.ravel()
    if not (np.array_equal(flat[idx], values) and np.array_equal(flat[~touched], w.ravel()[~touched])):
        raise NumericError("scatter kernel touched the wrong entries")


def _time(fn, repeats):
    for _ in range(WARMUP):
        fn()
    samples = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples[i] = time.perf_counter() - t0
    return samples


def time_dim(dim, density, rank, repeats, rng, scale=1.0):
    """Fuse and scatter timings for one weight size; returns (fuse, scatter) samples."""
    w, a, b, idx, values = _problem(dim, density, rank, rng)
    _validate(w, a, b, scale, idx, values)
    # destinations are allocated once, outside the timed region; the fuse
    # output is rewritten in full every iteration, the scatter target holds
    # the resident base weight and gets its touched entries rewritten
    fuse_out = np.empty_like(w)
    scatter_out = w.copy()
    t_fuse = _time(lambda: fuse_kernel(w, a, b, scale, fuse_out), repeats)
    t_scatter = _time(lambda: scatter_kernel(idx, values, scatter_out), repeats)
    return t_fuse, t_scatter


def _row(dim, repeats, t_fuse, t_scatter):
    fm, sm = float(t_fuse.mean()), float(t_scatter.mean())
    return BenchRow(
        dim=dim,
        repeats=repeats,
        t_fuse_mean=fm,
        t_fuse_std=float(t_fuse.std(ddof=1)),
        t_scatter_mean=sm,
        t_scatter_std=float(t_scatter.std(ddof=1)),
        speedup=sig3(fm / sm) if sm > 0 else math.inf,
        t_fuse_mom=median_of_means(t_fuse),
        t_scatter_mom=median_of_means(t_scatter),
        low_resolution=min(fm, sm) < MIN_RESOLVED,
    )


def bench(dims=(256, 512, 1024, 2048, 4096), density=0.01, rank=64, repeats=50, seed=0):
    """Time dense LoRA fusion against sparse overwrite at each ``dim``."""
    if repeats < 10:
        raise ParameterError("repeats must be >= 10")
    if any(d < 64 for d in dims):
        raise ParameterError("dims must be >= 64")
    if not 0.0 <= density <= 1.0:
        raise ParameterError("density must lie in [0, 1]")
    if any(not 1 <= rank <= d for d in dims):
        raise ParameterError("rank must lie in [1, dim]")
    rng = np.random.default_rng(seed)
    with single_threaded() as pinned:
        report = BenchReport(density, rank, pinned)
        for d in dims:
            t_fuse, t_scatter = time_dim(d, density, rank, repeats, rng)
            report.rows.append(_row(d, repeats, t_fuse, t_scatter))
    return report


@dataclass
class EndToEnd:
    t_lora_total: float
    t_shira_total: float
    speedup: float
    pinned: bool


def bench_end_to_end(model_spec, density=0.01, rank=64, repeats=10, seed=0):
    """Summed per-tensor switch time over a list of ``(rows, cols)`` weight shapes."""
    if not model_spec:
        raise ParameterError("model_spec must list at least one tensor shape")
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    problems = []
    for rows, cols in model_spec:
        r = min(rank, rows, cols)
        w = rng.standard_normal((rows, cols))
        k = int(round(density * rows * cols))
        idx = np.sort(rng.choice(rows * cols, size=k, replace=False))
        problems.append((w, rng.standard_normal((rows, r)), rng.standard_normal((r, cols)), idx, rng.standard_normal(k)))
    for w, a, b, idx, values in problems:
        _validate(w, a, b, 1.0, idx, values)
    fuse_outs = [np.empty_like(p[0]) for p in problems]
    scatter_outs = [p[0].copy() for p in problems]

    def switch_lora():
        for (w, a, b, _, _), out in zip(problems, fuse_outs):
            fuse_kernel(w, a, b, 1.0, out)

    def switch_shira():
        for (_, _, _, idx, values), out in zip(problems, scatter_outs):
            scatter_kernel(idx, values, out)

    with single_threaded() as pinned:
        t_lora = float(np.median(_time(switch_lora, repeats)))
        t_shira = float(np.median(_time(switch_shira, repeats)))
    return EndToEnd(t_lora, t_shira, sig3(t_lora / t_shira) if t_shira > 0 else math.inf, pinned)


def trend_ok(speedups, allowed_inversions=1):
    """Speedups non-decreasing along the ladder, tolerating ``allowed_inversions`` drops."""
    drops = sum(1 for a, b in zip(speedups, speedups[1:]) if b < a)
    return drops <= allowed_inversions
