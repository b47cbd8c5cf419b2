"""
Drawing how many units to keep
==============================

Each sample keeps a prefix of the channels. Its length is s plus a
geometric draw truncated to the n - s units not yet swept, sampled by
inverting the CDF in closed form.
"""

import numpy as np

from nestdrop.nested_dropout import (
    NestedDropoutState,
    build_mask,
    keep_probability,
    nd_forward,
    sample_kept_count,
    truncated_geometric_pmf,
)

rng = np.random.default_rng(0)
rho, s, n = 0.1, 0, 32

k = sample_kept_count(rho, s, n, rng, size=200_000)
emp = np.bincount(k, minlength=n + 1)[1:] / k.size
pmf = truncated_geometric_pmf(rho, n - s)
for j in (1, 2, 5, 10, 20, 32):
    print(f"k={j:2d}  empirical {emp[j - 1]:.4f}  exact {pmf[j - 1]:.4f}")

# unit i survives whenever k >= i, so early units are kept far more often
print([round(keep_probability(i, rho, s, n), 3) for i in (1, 2, 4, 8, 16, 32)])

# after sweeping 10 units the first 10 are always kept
k = sample_kept_count(0.3, 10, n, rng, size=10)
print("s=10 draws:", k)

print(build_mask(5, [1, 3, 5]))

# applied to a batch of feature maps
x = np.ones((4, 6, 2, 2))
st = NestedDropoutState(6, s=2, rho=0.3)
out = nd_forward(x, st, "train", rng=rng)
print("kept per sample:", st.last_draws, "->", out[:, :, 0, 0].sum(axis=1))
