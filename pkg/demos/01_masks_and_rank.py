"""Masks at 1-2% density, and why a sparse adapter need not be low rank."""

import numpy as np

from shira.masks import build_random_mask, build_struct_mask, build_wm_mask, density_to_k
from shira.rank import adapter_rank_report, lora_approximation_of_shira
from shira.store import SparseAdapter

dim = 256

# A struct mask trains every f-th row plus the diagonal. Pick f for ~1%.
struct = build_struct_mask(dim, dim, 128, include_diagonal=True)
rand = build_random_mask(dim, dim, 0.01, seed=0)
weights = np.random.default_rng(1).standard_normal((dim, dim))
wm = build_wm_mask(weights, density_to_k(dim, dim, 0.01))

for name, mask in [("struct", struct), ("rand", rand), ("wm", wm)]:
    rep = adapter_rank_report(mask, seed=0)
    print(f"{name:6s} density={rep.density:.4f} rank={rep.numeric_rank}/{dim}")

# the struct pattern without its diagonal is only rank 2
bare = adapter_rank_report(build_struct_mask(dim, dim, 128, include_diagonal=False))
print("struct without diagonal: rank", bare.numeric_rank)

# How much of a 1% random adapter can a rank-r update capture?
rng = np.random.default_rng(2)
idx = np.flatnonzero(rand.bits.ravel())
adapter = SparseAdapter("demo", dim, dim, idx, rng.standard_normal(idx.size))
total = np.sqrt((adapter.values**2).sum())
for r in (1, 4, 16, 64):
    fit = lora_approximation_of_shira(adapter, r)
    print(f"rank {r:3d}: relative Frobenius error {fit.frobenius_error / total:.3f}")
