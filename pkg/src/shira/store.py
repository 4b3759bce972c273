"""Sparse adapters: extraction, application, fusion and the SHRA file format.

A sparse adapter holds the difference ``S = W_new - W`` of one weight
tensor as sorted flat row-major indices plus values. Switching it onto a
base weight is an indexed overwrite of just those entries.

SHRA layout (all little-endian)::

    magic        4 bytes  b"SHRA"
    version      u16      1; bit 15 set => index-only file (masks)
    tensors      u32
    per tensor:
      name_len   u16, name (UTF-8)
      rows, cols u32, u32
      nnz        u64
      indices    nnz x u64, strictly increasing
      values     nnz x f32 (absent in index-only files)

Values are computed in float64 and narrowed to float32 on save; ``load``
widens back to float64. An adapter whose values are already
float32-representable (see :meth:`SparseAdapter.to_float32`) round-trips
bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptAdapterError, FormatError, ParameterError, ShapeError
from .linalg import as_matrix

MAGIC = b"SHRA"
FORMAT_VERSION = 1
INDEX_ONLY_FLAG = 0x8000

_HEADER = struct.Struct("<4sHI")
_TENSOR_DIMS = struct.Struct("<IIQ")


@dataclass(frozen=True, eq=False)
class SparseAdapter:
    name: str
    rows: int
    cols: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ParameterError("adapter dimensions must be positive")
        idx = np.asarray(self.indices)
        if idx.size and not np.issubdtype(idx.dtype, np.integer):
            raise CorruptAdapterError("indices must be integers", field="indices")
        idx = idx.astype(np.int64).ravel()
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if idx.size != vals.size:
            raise CorruptAdapterError("indices and values differ in length", field="values")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.rows * self.cols:
                raise CorruptAdapterError("index out of range", field="indices")
            if np.any(np.diff(idx) <= 0):
                raise CorruptAdapterError("indices not strictly increasing", field="indices")
        if not np.isfinite(vals).all():
            raise CorruptAdapterError("non-finite value", field="values")
        if np.any(vals == 0.0):
            raise CorruptAdapterError("stored zero value", field="values")
        idx.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self):
        return int(self.indices.size)

    @property
    def density(self):
        return self.nnz / (self.rows * self.cols)

    def to_float32(self):
        """Copy with values rounded to float32 precision (what ``save`` stores)."""
        vals = self.values.astype(np.float32).astype(np.float64)
        keep = vals != 0.0
        return SparseAdapter(self.name, self.rows, self.cols, self.indices[keep], vals[keep])

    def scaled(self, alpha):
        if alpha == 0:
            return SparseAdapter(self.name, self.rows, self.cols, [], [])
        return SparseAdapter(self.name, self.rows, self.cols, self.indices, alpha * self.values)

    def __eq__(self, other):
        """Field-for-field equality, values compared bitwise."""
        if not isinstance(other, SparseAdapter):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and np.array_equal(self.indices, other.indices)
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None

    def __repr__(self):
        return f"SparseAdapter(name={self.name!r}, shape={self.shape}, nnz={self.nnz})"


def empty_adapter(name, rows, cols):
    return SparseAdapter(name, rows, cols, np.empty(0, np.int64), np.empty(0))


def extract(w_new, w_base, name="weight"):
    """Adapter holding every position where ``w_new`` differs from ``w_base``."""
    w_new = as_matrix(w_new, "w_new")
    w_base = as_matrix(w_base, "w_base")
    if w_new.shape != w_base.shape:
        raise ShapeError(f"w_new {w_new.shape} and w_base {w_base.shape} differ")
    idx = np.flatnonzero(w_new != w_base)
    vals = w_new.ravel()[idx] - w_base.ravel()[idx]
    return SparseAdapter(name, *w_base.shape, idx, vals)


def _check_target(w_base, adapter):
    w = as_matrix(w_base, "w_base")
    if w.shape != adapter.shape:
        raise ShapeError(f"adapter {adapter.name!r} has shape {adapter.shape}, weight has {w.shape}")
    if adapter.nnz and (adapter.indices[0] < 0 or adapter.indices[-1] >= w.size):
        raise CorruptAdapterError("adapter index outside the weight", field="indices")
    return w


def apply(w_base, adapter, alpha=1.0):
    """``W + alpha * S`` written by indexed overwrite of the adapter's positions.

    Entries outside the adapter support are copied bit for bit. ``alpha = 0``
    returns an exact copy of ``w_base``.
    """
    w = _check_target(w_base, adapter)
    out = w.copy()
    if alpha == 0 or adapter.nnz == 0:
        return out
    flat = out.reshape(-1)
    idx = adapter.indices
    flat[idx] = flat[idx] + alpha * adapter.values
    return out


def to_dense(adapter):
    out = np.zeros(adapter.shape)
    out.reshape(-1)[adapter.indices] = adapter.values
    return out


def fuse_lora(w_base, adapter):
    """Dense fusion ``W + scale * A @ B``."""
    w = as_matrix(w_base, "w_base")
    delta = adapter.delta()
    if delta.shape != w.shape:
        raise ShapeError(f"LoRA product {delta.shape} does not match weight {w.shape}")
    return w + delta


def unfuse_lora(w_fused, adapter):
    w = as_matrix(w_fused, "w_fused")
    delta = adapter.delta()
    if delta.shape != w.shape:
        raise ShapeError(f"LoRA product {delta.shape} does not match weight {w.shape}")
    return w - delta


@dataclass
class FusionReport:
    """Support statistics of a multi-adapter fusion."""

    touched: int
    supports: list = field(default_factory=list)
    overlaps: dict = field(default_factory=dict)

    @property
    def total_overlap(self):
        return sum(self.overlaps.values())


def fuse_multi(w_base, adapters):
    """``W + sum_i alpha_i S_i``; values are summed where supports coincide.

    ``adapters`` is a sequence of ``(SparseAdapter, alpha)``. Returns the
    fused weight and a :class:`FusionReport` with pairwise overlap counts.
    """
    w = as_matrix(w_base, "w_base")
    pairs = [(a, float(alpha)) for a, alpha in adapters]
    for a, _ in pairs:
        _check_target(w, a)
    delta = np.zeros(w.size)
    for a, alpha in pairs:
        if alpha != 0:
            np.add.at(delta, a.indices, alpha * a.values)
    touched = np.unique(np.concatenate([a.indices for a, alpha in pairs if alpha != 0] or [np.empty(0, np.int64)]))
    out = w.copy()
    flat = out.reshape(-1)
    flat[touched] = flat[touched] + delta[touched]
    overlaps = {}
    for i in range(len(pairs)):
        for j in range(i + 1, len(pairs)):
            overlaps[(i, j)] = int(np.intersect1d(pairs[i][0].indices, pairs[j][0].indices, assume_unique=True).size)
    report = FusionReport(touched=int(touched.size), supports=[a.nnz for a, _ in pairs], overlaps=overlaps)
    return out, report


def param_count(adapter):
    return adapter.nnz


# serialization


def _encode(records, index_only):
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION | (INDEX_ONLY_FLAG if index_only else 0), len(records))]
    for name, rows, cols, idx, vals in records:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ParameterError("tensor name longer than 65535 bytes")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(_TENSOR_DIMS.pack(rows, cols, idx.size))
        parts.append(np.ascontiguousarray(idx, dtype="<u8").tobytes())
        if not index_only:
            parts.append(np.ascontiguousarray(vals, dtype="<f4").tobytes())
    return b"".join(parts)


def _narrow(adapter):
    with np.errstate(over="ignore"):
        vals = adapter.values.astype(np.float32)
    if not np.isfinite(vals).all():
        raise FormatError(f"{adapter.name}: value overflows float32", field="values")
    if np.any(vals == 0):
        raise FormatError(f"{adapter.name}: value underflows to zero in float32", field="values")
    return vals


def dumps(adapters):
    if isinstance(adapters, SparseAdapter):
        adapters = [adapters]
    records = [(a.name, a.rows, a.cols, a.indices, _narrow(a)) for a in adapters]
    return _encode(records, index_only=False)


def save(adapters, path):
    """Write one adapter or a list of adapters to ``path``."""
    data = dumps(adapters)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", field=what)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def _decode(data):
    r = _Reader(data)
    magic, version, count = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise FormatError("bad magic", field="magic")
    index_only = bool(version & INDEX_ONLY_FLAG)
    if version & ~INDEX_ONLY_FLAG != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version & ~INDEX_ONLY_FLAG}", field="version")
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, "name_length"))
        try:
            name = bytes(r.take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", field="name") from exc
        rows, cols, n = _TENSOR_DIMS.unpack(r.take(_TENSOR_DIMS.size, "dims"))
        if rows == 0 or cols == 0:
            raise FormatError(f"{name}: zero dimension", field="dims")
        if n > rows * cols:
            raise FormatError(f"{name}: nnz {n} exceeds {rows}x{cols}", field="nnz")
        idx = np.frombuffer(r.take(8 * n, "indices"), dtype="<u8")
        if n and (np.any(np.diff(idx) == 0) or np.any(idx[1:] < idx[:-1])):
            raise FormatError(f"{name}: indices not strictly increasing", field="indices")
        if n and idx[-1] >= rows * cols:
            raise FormatError(f"{name}: index out of range", field="indices")
        vals = None
        if not index_only:
            vals = np.frombuffer(r.take(4 * n, "values"), dtype="<f4").astype(np.float64)
            if not np.isfinite(vals).all() or np.any(vals == 0):
                raise FormatError(f"{name}: zero or non-finite value", field="values")
        records.append((name, rows, cols, idx.astype(np.int64), vals))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last tensor", field="trailing")
    return index_only, records


def loads_all(data):
    index_only, records = _decode(data)
    if index_only:
        raise FormatError("file is index-only (a mask), not an adapter", field="version")
    return [SparseAdapter(*rec) for rec in records]


def load_all(path):
    with open(path, "rb") as fh:
        return loads_all(fh.read())


def load(path):
    """Read a single-tensor adapter file."""
    adapters = load_all(path)
    if len(adapters) != 1:
        raise FormatError(f"expected one tensor, found {len(adapters)}", field="tensor_count")
    return adapters[0]


def save_masks(masks, path):
    """Write ``{name: Mask}`` as an index-only SHRA file."""
    from .masks import Mask

    if isinstance(masks, Mask):
        masks = {"weight": masks}
    records = [(name, m.rows, m.cols, m.indices(), None) for name, m in masks.items()]
    with open(path, "wb") as fh:
        fh.write(_encode(records, index_only=True))


def load_masks(path):
    from .masks import Mask

    with open(path, "rb") as fh:
        index_only, records = _decode(fh.read())
    if not index_only:
        raise FormatError("file carries values; expected an index-only mask", field="version")
    return {name: Mask.from_indices(rows, cols, idx) for name, rows, cols, idx, _ in records}


def file_size(adapters):
    """Byte size ``save`` will produce for ``adapters``."""
    if isinstance(adapters, SparseAdapter):
        adapters = [adapters]
    size = _HEADER.size
    for a in adapters:
        size += 2 + len(a.name.encode("utf-8")) + _TENSOR_DIMS.size + 12 * a.nnz
    return size

