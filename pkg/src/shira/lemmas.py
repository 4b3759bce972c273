"""Seeded numerical checks of the five adapter lemmas.

Each check returns a :class:`LemmaResult` with the worst residual seen, so
a caller (the ``verify-lemmas`` command, the tests) can print or assert it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import DEFAULT_RANK_TOL as RANK_TOL
from .model import SCALING_RULES
from .ortho import null_space_partner, verify_null_space, verify_struct_orthogonality
from .rank import lora_approximation_of_shira, param_complexity, verify_scale_independence
from .store import SparseAdapter, dumps, loads_all, to_dense

REL_TOL = 1e-6
EXACT_TOL = 1e-8


@dataclass
class LemmaResult:
    name: str
    passed: bool
    residual: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name} residual={self.residual:.3e} {self.detail}".rstrip()


def random_sparse_adapter(rng, rows, cols, density, name="s"):
    """Sparse adapter with f32-representable Gaussian values."""
    k = max(1, int(round(density * rows * cols)))
    idx = np.sort(rng.choice(rows * cols, size=k, replace=False))
    vals = rng.standard_normal(k).astype(np.float32).astype(np.float64)
    vals[vals == 0.0] = 1.0
    return SparseAdapter(name, rows, cols, idx, vals)


def check_param_complexity(seed, count=20):
    rng = np.random.default_rng(seed)
    worst = 0
    for i in range(count):
        a = random_sparse_adapter(rng, int(rng.integers(4, 65)), int(rng.integers(4, 65)), rng.uniform(0.01, 0.2), f"t{i}")
        stored = loads_all(dumps([a]))[0].nnz
        dense = int(np.count_nonzero(to_dense(a)))
        worst = max(worst, abs(param_complexity(a) - stored), abs(param_complexity(a) - dense))
    return LemmaResult("parameter-complexity", worst == 0, float(worst), f"adapters={count}")


def low_rank_residual(fit, r):
    """Worst deviation of a rank-``r`` fit from the Eckart-Young error values.

    Relative where the tail singular value is numerically nonzero; absolute
    (to be compared against ``EXACT_TOL``) when the adapter already has rank
    at most ``r`` and both errors should vanish.
    """
    tail = fit.sigma[r:]
    spec = float(tail[0]) if tail.size else 0.0
    frob2 = float(tail @ tail)
    if spec <= RANK_TOL * fit.sigma[0]:
        return max(fit.spectral_error, fit.frobenius_error) * REL_TOL / EXACT_TOL
    return max(abs(fit.spectral_error - spec) / spec, abs(fit.frobenius_error**2 - frob2) / frob2)


def check_low_rank_error(seed, count=20):
    """Eckart-Young: the rank-r residual has norms sigma_{r+1} and sqrt(sum_{i>r} sigma_i^2)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        n, m = int(rng.integers(8, 65)), int(rng.integers(8, 65))
        a = random_sparse_adapter(rng, n, m, rng.uniform(0.01, 0.1))
        for r in sorted({1, 2, min(n, m) // 2}):
            worst = max(worst, low_rank_residual(lora_approximation_of_shira(a, r), r))
    return LemmaResult("rank-r-approximation", worst <= REL_TOL, worst, f"adapters={count}")


def check_scale_independence(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((64, 64)).astype(np.float32).astype(np.float64)
    low = SparseAdapter("low", 64, 64, np.arange(64), np.ones(64))
    high = random_sparse_adapter(rng, 64, 64, 0.05, "high")
    alphas = (0.0, 0.25, 0.5, 1.0, 2.0, -1.0)
    reports = [verify_scale_independence(a, w, alphas) for a in (low, high)]
    expected = {
        "alpha_over_r": {1: 64.0, 4: 16.0, 16: 4.0, 64: 1.0},
        "alpha_over_sqrt_r": {1: 64.0, 4: 32.0, 16: 16.0, 64: 8.0},
        "unit": {1: 1.0, 4: 1.0, 16: 1.0, 64: 1.0},
    }
    lora_ok = all(rep.lora_scales[rule] == expected[rule] for rep in reports for rule in SCALING_RULES)
    ok = all(rep.ok for rep in reports) and lora_ok
    ranks = ",".join(str(rep.adapter_rank) for rep in reports)
    return LemmaResult("scale-independence", ok, 0.0 if ok else 1.0, f"ranks={ranks}")


def check_null_space(seed, count=50):
    worst, gap = 0.0, np.inf
    rng = np.random.default_rng(seed)
    for i in range(count):
        n, m = int(rng.integers(16, 33)), int(rng.integers(2, 9))
        s1 = rng.standard_normal((n, m))
        s2 = null_space_partner(s1, seed=seed * 1000 + i)
        worst = max(worst, verify_null_space(s1, s2).residual)
        gap = min(gap, verify_null_space(s1, rng.standard_normal((n, m))).residual)
    ok = worst <= 1e-10 and gap > 1e-3
    return LemmaResult("null-space-orthogonality", ok, worst, f"non-null min={gap:.3e}")


def check_struct(seed, dims=(64, 512), frequency=8):
    worst, ok = 0.0, True
    for j, m in enumerate(dims):
        c = verify_struct_orthogonality(frequency, (0, frequency // 2), m, seed=seed + j)
        worst = max(worst, c.product_error)
        ok = ok and c.ok
    return LemmaResult("struct-near-orthogonality", ok, worst, f"dims={','.join(map(str, dims))}")


def verify_all(seed=0):
    return [
        check_param_complexity(seed),
        check_low_rank_error(seed),
        check_scale_independence(seed),
        check_null_space(seed),
        check_struct(seed),
    ]
