"""Rank and parameter-count analysis of sparse adapters.

A sparse adapter can be far from low rank: a struct mask with its diagonal
is full rank at ~1% density. These helpers quantify that, and measure how
well the best rank-``r`` matrix (what a rank-``r`` LoRA could at most learn)
approximates a given sparse update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ParameterError
from .linalg import DEFAULT_RANK_TOL, numeric_rank, svd
from .masks import Mask
from .model import SCALING_RULES, LoraAdapter, effective_scale
from .store import SparseAdapter, apply, to_dense


def param_complexity(adapter):
    """Number of trainable parameters carried by ``adapter``: its nonzero count."""
    return int(adapter.indices.size)


class LowRankFit(NamedTuple):
    matrix: np.ndarray
    spectral_error: float
    frobenius_error: float
    sigma: np.ndarray


def lora_approximation_of_shira(adapter, r):
    """Best rank-``r`` approximation of a sparse adapter and its residual norms.

    The residual ``S - S_r`` is measured directly (its own SVD for the
    spectral norm), so the returned errors can be compared against the tail
    of ``sigma`` as an independent check.
    """
    s = to_dense(adapter) if isinstance(adapter, SparseAdapter) else np.asarray(adapter, dtype=np.float64)
    if not 1 <= r <= min(s.shape):
        raise ParameterError(f"rank {r} outside [1, {min(s.shape)}]")
    u, sigma, vt = svd(s)
    approx = (u[:, :r] * sigma[:r]) @ vt[:r]
    residual = s - approx
    spectral = float(svd(residual)[1][0])
    frob = float(np.linalg.norm(residual))
    return LowRankFit(approx, spectral, frob, sigma)


@dataclass
class RankReport:
    numeric_rank: int
    density: float
    dims: tuple

    @property
    def full_rank(self):
        return self.numeric_rank == min(self.dims)


def adapter_rank_report(obj, seed=0, tol=DEFAULT_RANK_TOL):
    """Numeric rank and density of an adapter, a mask, or a LoRA adapter.

    A mask has no values of its own; it is filled with seeded Gaussian
    values on its support, which gives the generic rank of the pattern.
    """
    if isinstance(obj, Mask):
        m = np.zeros(obj.shape)
        m[obj.bits] = np.random.default_rng(seed).standard_normal(obj.count)
    elif isinstance(obj, SparseAdapter):
        m = to_dense(obj)
    elif isinstance(obj, LoraAdapter):
        m = obj.delta()
    else:
        m = np.asarray(obj, dtype=np.float64)
    density = np.count_nonzero(m) / m.size
    rank = numeric_rank(m, tol) if m.any() else 0
    return RankReport(rank, float(density), tuple(m.shape))


@dataclass
class ScaleReport:
    """Outcome of the scale-independence check.

    ``alpha_exact[a]`` holds when ``apply(W, S, a)`` equals ``W + a*S`` at
    every touched entry and leaves every other entry bit-identical.
    ``lora_scales[rule][r]`` is the factor a rank-``r`` LoRA multiplies its
    update by for the same nominal alpha.
    """

    adapter_rank: int
    shira_scale: float
    alpha_exact: dict = field(default_factory=dict)
    lora_scales: dict = field(default_factory=dict)

    @property
    def ok(self):
        return self.shira_scale == 1.0 and all(self.alpha_exact.values())


def verify_scale_independence(adapter, w_base, alphas, lora_alpha=64.0, ranks=(1, 4, 16, 64)):
    w = np.asarray(w_base, dtype=np.float64)
    idx = adapter.indices
    untouched = np.ones(w.size, dtype=bool)
    untouched[idx] = False
    exact = {}
    for a in alphas:
        out = apply(w, adapter, a).ravel()
        expected = w.ravel()[idx] + a * adapter.values
        exact[a] = bool(np.array_equal(out[idx], expected) and np.array_equal(out[untouched], w.ravel()[untouched]))
    scales = {}
    for rule in SCALING_RULES:
        scales[rule] = {}
        for r in ranks:
            lora = LoraAdapter("w", np.zeros((1, r)), np.zeros((r, 1)), lora_alpha, rule)
            scales[rule][r] = effective_scale(lora)
    rank = adapter_rank_report(adapter).numeric_rank
    return ScaleReport(rank, effective_scale(adapter), exact, scales)
