"""
What you keep matters: top-k against random and bottom-k retention
==================================================================

Three one-shot policies prune the visual cache once at the second decoding
step, keeping the same number of tokens. The only difference is which tokens
survive: the most attended, a random subset, or the least attended. Averaged
over the steps after the prune, visual attention should order the policies
top > random > bottom on most seeds.
"""

import numpy as np

from kvprune import (
    BottomK,
    DecodeRequest,
    DecoderConfig,
    FixedTopK,
    RandomKeep,
    build_synthetic_prompt,
    decode,
    init_weights,
)

config = DecoderConfig(
    num_layers=2, num_heads=8, head_dim=8, hidden_dim=64,
    vocab_size=256, max_seq_len=512,
).validate()

keep = 16
runs = 10
wins = 0
print(f"keeping {keep} of 96 visual tokens, {runs} seeded runs")
print("run   top-k            random           bottom-k         ordered")
for i in range(runs):
    weights = init_weights(config, 1000 + i)
    tokens, roles = build_synthetic_prompt(48, 96, seed=1100 + i, vocab_size=256)
    request = DecodeRequest(
        tokens=tokens, roles=roles, max_new_tokens=8, stop_tokens=frozenset()
    )
    means = {}
    for name, policy in (
        ("top", FixedTopK(keep)),
        ("rnd", RandomKeep(keep, seed=1200 + i)),
        ("bot", BottomK(keep)),
    ):
        result = decode(request, weights, config, policy=policy)
        post = [e for e in result.events if e.step >= 3]
        means[name] = np.array([e.avg_visual for e in post]).mean(axis=0)
    ordered = bool(
        np.all(means["top"] > means["rnd"]) and np.all(means["rnd"] > means["bot"])
    )
    wins += ordered
    fmt = lambda v: " ".join(f"{x:.4f}" for x in v)
    print(f"{i:3d}   {fmt(means['top'])}  {fmt(means['rnd'])}  "
          f"{fmt(means['bot'])}  {'yes' if ordered else 'NO'}")

print(f"\nper-layer ordering held in {wins}/{runs} runs")
