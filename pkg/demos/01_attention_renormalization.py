"""
Why pruning concentrates attention
==================================

Softmax attention distributes a fixed budget of probability mass over the
cached keys. Evicting any subset of keys and renormalizing hands the evicted
mass to the survivors, so every surviving weight strictly increases. This
script shows the effect on a single frozen query, then checks it over many
random draws.
"""

import numpy as np

from kvprune import softmax_row

rng = np.random.default_rng(0)

# One query against 8 keys. Scores are scaled dot products, as in the engine.
d_k = 8
query = rng.standard_normal(d_k)
keys = rng.standard_normal((8, d_k))
scores = keys @ query / np.sqrt(d_k)
full = softmax_row(scores)

# Evict the three keys with the least attention, keep the rest.
evict = np.argsort(full)[:3]
keep = np.setdiff1d(np.arange(8), evict)
renormalized = softmax_row(scores[keep])

print("key   before   after    change")
for row, idx in enumerate(keep):
    before, after = full[idx], renormalized[row]
    print(f"{idx:3d}  {before:.4f}  {after:.4f}  {after - before:+.4f}")
print(f"evicted keys {sorted(int(i) for i in evict)} carried "
      f"{full[evict].sum():.4f} of the mass")

# The increase is not an artifact of this draw. Check 2000 random
# query/key/subset triples; a single violation would print below.
violations = 0
for _ in range(2000):
    n = int(rng.integers(2, 64))
    q = rng.standard_normal(d_k)
    k = rng.standard_normal((n, d_k))
    s = k @ q / np.sqrt(d_k)
    p = softmax_row(s)
    drop = rng.choice(n, size=int(rng.integers(1, n)), replace=False)
    kept = np.setdiff1d(np.arange(n), drop)
    if not np.all(softmax_row(s[kept]) > p[kept]):
        violations += 1
print(f"violations over 2000 random triples: {violations}")
