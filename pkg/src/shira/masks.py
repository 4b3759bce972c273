"""Trainable-weight masks for the five sparse adapter strategies.

* ``struct`` -- every ``f``-th row (or column) plus, optionally, the diagonal.
* ``rand``   -- independent Bernoulli(p) bits.
* ``wm``     -- top-k weights by magnitude.
* ``grad``   -- top-k by accumulated absolute gradient on calibration batches.
* ``snip``   -- top-k by ``|w| * accumulated |g|``.

All top-k selections break ties in favour of the lower row-major flat index,
and accept an ``exclude`` set of flat indices so that a second task can take
the "next" top-k positions (non-overlapping adapters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .linalg import as_matrix

STRATEGIES = ("struct", "rand", "wm", "grad", "snip")


@dataclass(frozen=True)
class Mask:
    """Binary trainable-position mask, stored as a boolean ``(rows, cols)`` array."""

    bits: np.ndarray
    warning: str | None = None

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {bits.shape}")
        bits = bits.copy()
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def rows(self):
        return self.bits.shape[0]

    @property
    def cols(self):
        return self.bits.shape[1]

    @property
    def shape(self):
        return self.bits.shape

    @property
    def count(self):
        return int(np.count_nonzero(self.bits))

    @property
    def density(self):
        return self.count / self.bits.size

    def indices(self):
        """Sorted flat row-major indices of the set bits."""
        return np.flatnonzero(self.bits)

    def as_float(self):
        return self.bits.astype(np.float64)

    @classmethod
    def from_indices(cls, rows, cols, indices, warning=None):
        bits = np.zeros(rows * cols, dtype=bool)
        bits[np.asarray(indices, dtype=np.int64)] = True
        return cls(bits.reshape(rows, cols), warning)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    __hash__ = None


@dataclass
class MaskRecipe:
    """Flat description of a mask; only the fields of ``strategy`` are read."""

    strategy: str
    density: float = 0.02
    frequency: int = 1
    axis: str = "rows"
    include_diagonal: bool = True
    bernoulli_p: float = 0.02
    seed: int = 0
    exclude: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0.0 < self.density <= 1.0:
            raise ParameterError("density must lie in (0, 1]")
        if self.axis not in ("rows", "cols"):
            raise ParameterError("axis must be 'rows' or 'cols'")


@dataclass
class GradSnapshot:
    """Accumulated absolute gradient of one weight tensor."""

    grad: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.grad = as_matrix(self.grad, "gradient snapshot")
        if (self.grad < 0).any():
            raise ParameterError("gradient snapshot must be non-negative")

    @property
    def shape(self):
        return self.grad.shape


def build_struct_mask(rows, cols, frequency, axis="rows", include_diagonal=True, offset=0):
    """Every ``frequency``-th row/column starting at ``offset``, plus the diagonal.

    A stride longer than the axis selects no rows/columns; the mask then
    carries a ``warning`` (diagonal-only, or empty).
    """
    if frequency < 1:
        raise ParameterError("frequency must be >= 1")
    if axis not in ("rows", "cols"):
        raise ParameterError("axis must be 'rows' or 'cols'")
    if not 0 <= offset < frequency:
        raise ParameterError("offset must lie in [0, frequency)")
    bits = np.zeros((rows, cols), dtype=bool)
    extent = rows if axis == "rows" else cols
    warning = None
    if frequency > extent:
        warning = "stride exceeds axis length: no rows/columns selected"
    elif axis == "rows":
        bits[offset::frequency, :] = True
    else:
        bits[:, offset::frequency] = True
    if include_diagonal:
        d = np.arange(min(rows, cols))
        bits[d, d] = True
    if not bits.any():
        warning = "empty mask"
    return Mask(bits, warning)


def build_random_mask(rows, cols, p, seed):
    """Each bit independently 1 with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ParameterError("p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    bits = rng.random((rows, cols)) < p
    return Mask(bits, None if bits.any() else "empty mask")


def top_k_indices(scores, k, exclude=()):
    """Flat indices of the ``k`` largest scores, ascending index order.

    Ties at the cut-off go to the lower flat index. Indices in ``exclude``
    are never chosen.
    """
    flat = np.asarray(scores)
    if flat.dtype.kind != "f":
        flat = flat.astype(np.float64)
    flat = flat.ravel()
    if isinstance(exclude, np.ndarray):
        excluded = exclude.astype(np.int64).ravel()
    else:
        excluded = np.fromiter((int(i) for i in exclude), dtype=np.int64, count=len(exclude))
    if excluded.size and (excluded.min() < 0 or excluded.max() >= flat.size):
        raise ParameterError("exclude contains out-of-range indices")
    available = flat.size - np.unique(excluded).size
    if not 0 <= k <= available:
        raise ParameterError(f"k={k} outside [0, {available}] selectable positions")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if excluded.size:
        flat = flat.copy()
        flat[excluded] = -np.inf
    threshold = np.partition(flat, flat.size - k)[flat.size - k]
    above = np.flatnonzero(flat > threshold)
    at = np.flatnonzero(flat == threshold)[: k - above.size]
    return np.sort(np.concatenate([above, at]))


def _top_k_mask(scores, k, exclude):
    rows, cols = scores.shape
    idx = top_k_indices(scores, k, exclude)
    return Mask.from_indices(rows, cols, idx, None if idx.size else "empty mask")


def build_wm_mask(weights, k, exclude=()):
    """Top-``k`` positions by ``|w|``."""
    w = as_matrix(weights, "weights")
    return _top_k_mask(np.abs(w), k, exclude)


def build_grad_mask(grads, k, exclude=()):
    """Top-``k`` positions by accumulated ``|g|``."""
    if grads.sample_count < 1:
        raise ParameterError("gradient snapshot holds no samples")
    return _top_k_mask(grads.grad, k, exclude)


def build_snip_mask(weights, grads, k, exclude=()):
    """Top-``k`` positions by the SNIP saliency ``|w * g|``."""
    w = as_matrix(weights, "weights")
    if w.shape != grads.shape:
        raise ShapeError(f"weights {w.shape} and gradients {grads.shape} differ")
    if grads.sample_count < 1:
        raise ParameterError("gradient snapshot holds no samples")
    return _top_k_mask(np.abs(w * grads.grad), k, exclude)


def density_to_k(rows, cols, density):
    return int(round(density * rows * cols))


def build_mask(recipe, shape=None, weights=None, grads=None):
    """Dispatch a :class:`MaskRecipe` to the matching builder."""
    if weights is not None:
        shape = np.shape(weights)
    elif grads is not None:
        shape = grads.shape
    if shape is None:
        raise ParameterError("a shape, weights or gradient snapshot is required")
    rows, cols = shape
    s = recipe.strategy
    if s == "struct":
        return build_struct_mask(rows, cols, recipe.frequency, recipe.axis, recipe.include_diagonal)
    if s == "rand":
        return build_random_mask(rows, cols, recipe.bernoulli_p, recipe.seed)
    k = density_to_k(rows, cols, recipe.density)
    if s == "wm":
        if weights is None:
            raise ParameterError("wm strategy needs weights")
        return build_wm_mask(weights, k, recipe.exclude)
    if grads is None:
        raise ParameterError(f"{s} strategy needs a gradient snapshot")
    if s == "grad":
        return build_grad_mask(grads, k, recipe.exclude)
    if weights is None:
        raise ParameterError("snip strategy needs weights")
    return build_snip_mask(weights, grads, k, recipe.exclude)


def struct_frequency_for_density(rows, cols, density, axis="rows", include_diagonal=True):
    """Smallest stride whose struct mask does not exceed ``density``."""
    for f in range(1, (rows if axis == "rows" else cols) + 1):
        if build_struct_mask(rows, cols, f, axis, include_diagonal).density <= density:
            return f
    raise ParameterError(f"no stride reaches density {density}")


def collect_gradients(model, batches, loss="mse"):
    """Accumulate ``sum_b |dL_b/dW|`` for each weight matrix of ``model``.

    The model is not modified. Returns ``{tensor name: GradSnapshot}``.
    """
    from .model import backward, WEIGHT_TENSORS

    batches = list(batches)
    if not batches:
        raise ParameterError("at least one calibration batch is required")
    acc = {name: np.zeros_like(getattr(model, name)) for name in WEIGHT_TENSORS}
    for x, target in batches:
        grads = backward(model, x, target, loss)
        for name in WEIGHT_TENSORS:
            acc[name] += np.abs(grads[name])
    return {name: GradSnapshot(acc[name], len(batches)) for name in WEIGHT_TENSORS}
