"""How much do two adapters interfere? AWOM and AWOR for a few constructions."""

import numpy as np

from shira.ortho import (
    AdapterStyle,
    awom,
    awor,
    null_space_partner,
    simulate_fig4,
    simulate_wm_overlap,
    verify_null_space,
    verify_struct_orthogonality,
)

rng = np.random.default_rng(0)

# dense adapters: the product A1^T A2 has no zeros at all
a1, a2 = rng.standard_normal((128, 128)), rng.standard_normal((128, 128))
print(f"dense pair: AWOM {awom(a1, a2):.1f}, AWOR {awor(a1, a2):.3f}")

# a partner built in the null space of the first adapter does not interact
s1 = rng.standard_normal((32, 4))
check = verify_null_space(s1, null_space_partner(s1, seed=1))
print("null-space pair orthogonal:", bool(check), f"residual {check.residual:.1e}")

# two struct adapters on disjoint rows: the product keeps the struct pattern
c = verify_struct_orthogonality(100, (0, 50), 1024, seed=0)
print(f"struct pair at 1024: AWOR {c.awor:.4f} >= bound {c.awor_bound:.4f}, product error {c.product_error}")

# random pairs of each style at a modest size
rep = simulate_fig4([512], trials=5, seed=0)
for row in rep.rows:
    print(f"{row.style:13s} AWOR {row.awor_mean:.4f}  AWOM {row.awom_mean:10.1f}")

# top-|w| adapters: overlapping and non-overlapping supports behave alike
wm = simulate_wm_overlap([512], trials=5, seed=0)
for row in wm.rows:
    print(f"wm {row.overlap_mode:11s} AWOR {row.awor_mean:.4f}  AWOM {row.awom_mean:.1f}")
