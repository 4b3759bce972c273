"""Adapter weight orthogonality: AWOM / AWOR and the random-adapter study.

For two adapters ``A1, A2`` of shape ``(n, m)`` the product ``A1.T @ A2`` is
``m x m``. AWOM is its norm (Frobenius by default); AWOR is its sparsity,
``1 - nnz(A1.T @ A2) / m**2``.

Large sparse adapters are handled as ``scipy.sparse`` CSR matrices so a
4096 x 4096 product at 99% sparsity never becomes dense.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import svds

from .errors import ParameterError, ShapeError
from .linalg import as_matrix, svd
from .masks import top_k_indices
from .store import SparseAdapter, to_dense

DEFAULT_EPS = 1e-12
NULL_SPACE_TOL = 1e-10
STYLES = ("dense", "sparse_lora", "shira_wm", "shira_struct")
SIM_DTYPE = np.float32


def _operand(a):
    if sp.issparse(a):
        return sp.csr_matrix(a, dtype=np.float64)
    return as_matrix(a)


def adapter_product(a1, a2):
    """``a1.T @ a2``; sparse if either operand is sparse."""
    a1, a2 = _operand(a1), _operand(a2)
    if a1.shape != a2.shape:
        raise ShapeError(f"adapters have shapes {a1.shape} and {a2.shape}")
    if sp.issparse(a1) or sp.issparse(a2):
        p = sp.csr_matrix(sp.csr_matrix(a1).T @ sp.csr_matrix(a2))
        p.sum_duplicates()
        return p
    return a1.T @ a2


def _values(p):
    return p.data if sp.issparse(p) else p.ravel()


def product_nnz(p, eps=DEFAULT_EPS):
    if eps < 0:
        raise ParameterError("eps must be non-negative")
    return int(np.count_nonzero(np.abs(_values(p)) > eps))


def product_norm(p, norm="fro"):
    if norm == "fro":
        v = _values(p).astype(np.float64, copy=False)
        return float(math.sqrt(float(v @ v)))
    if norm == "spectral":
        if sp.issparse(p):
            if p.nnz == 0:
                return 0.0
            if min(p.shape) <= 2:
                return float(np.linalg.norm(p.toarray(), 2))
            return float(svds(p, k=1, return_singular_vectors=False)[0])
        return float(np.linalg.norm(p, 2))
    raise ParameterError("norm must be 'fro' or 'spectral'")


def awom(a1, a2, norm="fro"):
    """Norm of ``a1.T @ a2``: zero for orthogonal adapters."""
    return product_norm(adapter_product(a1, a2), norm)


def awor(a1, a2, eps=DEFAULT_EPS):
    """Fraction of exactly-zero (``|x| <= eps``) entries of ``a1.T @ a2``."""
    p = adapter_product(a1, a2)
    return 1.0 - product_nnz(p, eps) / (p.shape[0] * p.shape[1])


@dataclass
class NullSpaceCheck:
    orthogonal: bool
    residual: float

    def __bool__(self):
        return self.orthogonal


def _dense(a):
    return to_dense(a) if isinstance(a, SparseAdapter) else as_matrix(a)


def verify_null_space(a1, a2, tol=NULL_SPACE_TOL):
    """Whether ``S1.T @ S2`` vanishes, i.e. the adapters cannot interfere multiplicatively."""
    if a1.shape != a2.shape:
        raise ShapeError(f"adapters have shapes {a1.shape} and {a2.shape}")
    residual = float(np.linalg.norm(_dense(a1).T @ _dense(a2)))
    return NullSpaceCheck(residual <= tol, residual)


def null_space_partner(s1, seed=0, tol=1e-10):
    """Random matrix ``Z`` with ``s1.T @ Z = 0``.

    Projects a Gaussian matrix onto the orthogonal complement of the column
    space of ``s1`` (via its SVD).
    """
    s1 = as_matrix(s1)
    n, m = s1.shape
    u, s, _ = svd(s1)
    rank = int(np.count_nonzero(s > tol * s[0])) if s[0] > 0 else 0
    g = np.random.default_rng(seed).standard_normal((n, m))
    basis = u[:, :rank]
    return g - basis @ (basis.T @ g)


# SHiRA-Struct pairs


def struct_rows(m, frequency, offset):
    return np.arange(offset, m, frequency)


def struct_delta(m, frequency, offset, rng, dtype=np.float64):
    """Sparse ``S``: Gaussian values on rows ``offset, offset + f, ...``."""
    rows = struct_rows(m, frequency, offset)
    r = np.repeat(rows, m)
    c = np.tile(np.arange(m), rows.size)
    return sp.csr_matrix((rng.standard_normal(r.size, dtype=dtype), (r, c)), shape=(m, m))


@dataclass
class StructCheck:
    m: int
    frequency: int
    offsets: tuple
    product_error: float
    nnz_product: int
    nnz_identity: int
    nnz_s1: int
    nnz_s2: int
    awor: float
    awor_bound: float

    @property
    def product_ok(self):
        return self.product_error <= 1e-12

    @property
    def bound_ok(self):
        return self.nnz_product <= self.nnz_identity + self.nnz_s1 + self.nnz_s2

    @property
    def ok(self):
        return self.product_ok and self.bound_ok


def verify_struct_orthogonality(frequency, offsets, m, seed=0, eps=DEFAULT_EPS, values=None):
    """Check the product structure of two non-overlapping struct adapters.

    With ``A_i = I + S_i`` and ``S_1``, ``S_2`` on disjoint rows, checks
    (a) ``A1.T @ A2 == I + S2 + S1.T`` elementwise (to 1e-12) and
    (b) ``nnz(A1.T @ A2) <= nnz(I) + nnz(S1) + nnz(S2)``, equivalently
    ``AWOR >= 1 - (s_I + s_1 + s_2)``.

    ``values`` may supply ``(S1, S2)`` directly instead of random ones.
    """
    o1, o2 = offsets
    if o1 == o2:
        raise ParameterError("offsets coincide: adapters overlap")
    if not (0 <= o1 < frequency and 0 <= o2 < frequency):
        raise ParameterError("offsets must lie in [0, frequency)")
    if frequency > m:
        raise ParameterError("frequency exceeds dimension")
    if values is None:
        rng = np.random.default_rng(seed)
        s1 = struct_delta(m, frequency, o1, rng)
        s2 = struct_delta(m, frequency, o2, rng)
    else:
        s1, s2 = (sp.csr_matrix(v, dtype=np.float64) for v in values)
    eye = sp.identity(m, format="csr")
    product = adapter_product(eye + s1, eye + s2)
    expected = sp.csr_matrix(eye + s2 + s1.T)
    diff = product - expected
    err = float(np.abs(diff.data).max()) if diff.nnz else 0.0
    nnz_p = product_nnz(product, eps)
    nnz_i, nnz_1, nnz_2 = m, product_nnz(s1, 0.0), product_nnz(s2, 0.0)
    return StructCheck(
        m=m,
        frequency=frequency,
        offsets=(o1, o2),
        product_error=err,
        nnz_product=nnz_p,
        nnz_identity=nnz_i,
        nnz_s1=nnz_1,
        nnz_s2=nnz_2,
        awor=1.0 - nnz_p / m**2,
        awor_bound=1.0 - (nnz_i + nnz_1 + nnz_2) / m**2,
    )


# random adapter styles


@dataclass(frozen=True)
class AdapterStyle:
    """How to draw a random adapter pair.

    ``sparsity`` is the zero fraction of SHiRA adapters and of each LoRA
    factor. ``rank`` (sparse_lora) defaults to ``dim // 4``; ``frequency``
    (shira_struct) defaults to ``round(1 / (1 - sparsity))``.
    """

    kind: str
    sparsity: float = 0.99
    rank: int | None = None
    frequency: int | None = None
    offset: int = 0

    def __post_init__(self):
        if self.kind not in STYLES:
            raise ParameterError(f"unknown style {self.kind!r}; choose from {STYLES}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ParameterError("sparsity must lie in [0, 1)")
        if self.frequency is not None and not 0 <= self.offset < self.frequency:
            raise ParameterError("struct offset must be below the frequency")

    def lora_rank(self, dim):
        return self.rank if self.rank is not None else max(1, dim // 4)

    def struct_frequency(self):
        if self.frequency is not None:
            return self.frequency
        return max(2, int(round(1.0 / (1.0 - self.sparsity))))


def _sparse_from_flat(idx, values, shape):
    idx = np.asarray(idx, dtype=np.int64)
    rows, cols = np.divmod(idx, shape[1])
    return sp.csr_matrix((values, (rows, cols)), shape=shape)


def _sparse_gaussian(shape, sparsity, rng, dtype=np.float64):
    """Gaussian matrix with ``round(sparsity * size)`` entries zeroed at random; CSR."""
    size = shape[0] * shape[1]
    keep = size - int(round(sparsity * size))
    idx = np.sort(rng.choice(size, size=keep, replace=False))
    return _sparse_from_flat(idx, rng.standard_normal(keep, dtype=dtype), shape)


def _top_fraction(weights, k, exclude=()):
    idx = top_k_indices(np.abs(weights), k, np.asarray(exclude, dtype=np.int64))
    return _sparse_from_flat(idx, weights.ravel()[idx], weights.shape), idx


WM_MODES = ("overlap", "non_overlap", "shared")


def wm_pair(dim, sparsity, mode, rng, dtype=np.float64):
    """Two SHiRA-WM adapters, each a Gaussian matrix keeping its top-``|w|`` entries.

    ``overlap``: the two supports are chosen independently and may share
    positions. ``non_overlap``: the second adapter picks its top entries
    outside the first one's support. ``shared``: both adapters live on the
    top positions of the first matrix (identical supports).
    """
    if mode not in WM_MODES:
        raise ParameterError(f"mode must be one of {WM_MODES}")
    k = dim * dim - int(round(sparsity * dim * dim))
    w1 = rng.standard_normal((dim, dim), dtype=dtype)
    a1, first = _top_fraction(w1, k)
    del w1
    w2 = rng.standard_normal((dim, dim), dtype=dtype)
    if mode == "shared":
        a2 = _sparse_from_flat(first, w2.ravel()[first], w2.shape)
    else:
        a2, _ = _top_fraction(w2, k, first if mode == "non_overlap" else ())
    return a1, a2


def struct_pair(dim, style, rng, dtype=np.float64):
    f = min(style.struct_frequency(), dim)
    o1 = style.offset % f
    o2 = (o1 + f // 2) % f if f > 1 else o1
    eye = sp.identity(dim, dtype=dtype, format="csr")
    return eye + struct_delta(dim, f, o1, rng, dtype), eye + struct_delta(dim, f, o2, rng, dtype)


def sparse_lora_factors(dim, style, rng, dtype=np.float64):
    r = style.lora_rank(dim)
    return (
        _sparse_gaussian((dim, r), style.sparsity, rng, dtype),
        _sparse_gaussian((r, dim), style.sparsity, rng, dtype),
    )


def sample_pair(dim, style, rng, mode="overlap", dtype=np.float64):
    """Materialize two random adapters of ``style`` (dense arrays or CSR)."""
    if style.kind == "dense":
        return rng.standard_normal((dim, dim), dtype=dtype), rng.standard_normal((dim, dim), dtype=dtype)
    if style.kind == "sparse_lora":
        a1, b1 = sparse_lora_factors(dim, style, rng, dtype)
        a2, b2 = sparse_lora_factors(dim, style, rng, dtype)
        return sp.csr_matrix(a1 @ b1), sp.csr_matrix(a2 @ b2)
    if style.kind == "shira_wm":
        return wm_pair(dim, style.sparsity, mode, rng, dtype)
    return struct_pair(dim, style, rng, dtype)


def _product(a1, a2):
    if sp.issparse(a1) or sp.issparse(a2):
        p = sp.csr_matrix(sp.csr_matrix(a1).T @ sp.csr_matrix(a2))
        p.sum_duplicates()
        return p
    return a1.T @ a2


def pair_product(dim, style, rng, mode="overlap", dtype=np.float64):
    """``A1.T @ A2`` for a random pair, computed in the cheapest valid order.

    Arithmetic stays in ``dtype``. Identical in distribution to
    ``adapter_product(*sample_pair(...))``; the sparse-LoRA case is evaluated
    as ``B1.T @ (A1.T @ A2) @ B2``.
    """
    if style.kind == "sparse_lora":
        a1, b1 = sparse_lora_factors(dim, style, rng, dtype)
        a2, b2 = sparse_lora_factors(dim, style, rng, dtype)
        core = (a1.T @ a2).toarray()
        left = np.asarray(b1.T @ core)
        return np.asarray((sp.csr_matrix(b2).T @ left.T).T)
    return _product(*sample_pair(dim, style, rng, mode, dtype))


@dataclass
class OrthoRow:
    dim: int
    style: str
    overlap_mode: str
    awom_mean: float
    awom_std: float
    awor_mean: float
    awor_std: float
    trials: int
    awom_values: np.ndarray = field(default=None, repr=False)
    awor_values: np.ndarray = field(default=None, repr=False)


CSV_FIELDS = ("dim", "style", "overlap_mode", "awom_mean", "awom_std", "awor_mean", "awor_std", "trials")


@dataclass
class OrthoReport:
    rows: list = field(default_factory=list)

    def get(self, dim, style, overlap_mode=None):
        for row in self.rows:
            if row.dim == dim and row.style == style and (overlap_mode is None or row.overlap_mode == overlap_mode):
                return row
        raise KeyError((dim, style, overlap_mode))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for r in self.rows:
                w.writerow([getattr(r, f) for f in CSV_FIELDS])


def _default_mode(style):
    return {"dense": "independent", "sparse_lora": "independent", "shira_wm": "overlap", "shira_struct": "non_overlap"}[style.kind]


def cell_rng(seed, dim, tag, trial):
    """Independent generator for one (dim, style, trial) cell."""
    return np.random.default_rng([seed, dim, sum(map(ord, tag)) * 1009 + len(tag), trial])


def run_cell(dim, style, trials, seed, overlap_mode=None, eps=DEFAULT_EPS, norm="fro", dtype=SIM_DTYPE):
    mode = overlap_mode or _default_mode(style)
    tag = f"{style.kind}/{mode}"
    awoms, awors = np.empty(trials), np.empty(trials)
    for t in range(trials):
        rng = cell_rng(seed, dim, tag, t)
        p = pair_product(dim, style, rng, mode, dtype)
        awoms[t] = product_norm(p, norm)
        awors[t] = 1.0 - product_nnz(p, eps) / dim**2
    return OrthoRow(
        dim, style.kind, mode,
        float(awoms.mean()), float(awoms.std(ddof=1)) if trials > 1 else 0.0,
        float(awors.mean()), float(awors.std(ddof=1)) if trials > 1 else 0.0,
        trials, awoms, awors,
    )


def simulate_fig4(dims, styles=None, trials=50, seed=0, eps=DEFAULT_EPS, norm="fro", dtype=SIM_DTYPE):
    """Mean/std AWOM and AWOR of random adapter pairs for each dim and style.

    Adapters are drawn and multiplied in ``dtype`` (float32 by default, which
    halves the cost of the dense 4096 products; exact zeros stay exact).
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    if any(d < 2 for d in dims):
        raise ParameterError("dims must be >= 2")
    styles = [AdapterStyle(s) if isinstance(s, str) else s for s in (styles or STYLES)]
    report = OrthoReport()
    for dim in dims:
        for style in styles:
            report.rows.append(run_cell(dim, style, trials, seed, eps=eps, norm=norm, dtype=dtype))
    return report


def simulate_wm_overlap(
    dims, trials=50, sparsity=0.99, seed=0, eps=DEFAULT_EPS, norm="fro", modes=("overlap", "non_overlap"), dtype=SIM_DTYPE
):
    """SHiRA-WM overlapping vs non-overlapping pairs at each dim."""
    style = AdapterStyle("shira_wm", sparsity)
    report = OrthoReport()
    for dim in dims:
        for mode in modes:
            report.rows.append(run_cell(dim, style, trials, seed, overlap_mode=mode, eps=eps, norm=norm, dtype=dtype))
    return report


def pooled_std(a, b):
    return math.sqrt((a.awor_std**2 + b.awor_std**2) / 2), math.sqrt((a.awom_std**2 + b.awom_std**2) / 2)
