"""
The efficiency side: fewer cached tokens, fewer FLOPs
=====================================================

Attention cost is linear in cache width, so pruning pays for itself in exact
integer FLOPs regardless of wall-clock noise. This script decodes the same
request once without pruning and once with the adaptive policy, compares the
ledgers, then measures per-token latency over interleaved repetitions.
"""

from kvprune import (
    AdaptivePolicy,
    DecodeRequest,
    DecoderConfig,
    build_synthetic_prompt,
    decode,
    init_weights,
    measure_latency,
)

config = DecoderConfig(
    num_layers=4, num_heads=4, head_dim=16, hidden_dim=64,
    vocab_size=256, max_seq_len=512,
).validate()
weights = init_weights(config, 7)
tokens, roles = build_synthetic_prompt(16, 64, seed=11, vocab_size=256)
request = DecodeRequest(
    tokens=tokens, roles=roles, max_new_tokens=64, stop_tokens=frozenset()
)


def run(policy):
    return decode(request, weights, config, policy=policy)


dense = run(None)
pruned = run(AdaptivePolicy(r=0.4, t=3))

for name, result in (("dense", dense), ("adaptive", pruned)):
    summary = result.ledger.summary()
    print(f"{name:9s} attention {summary['attention_flops']:>12,} FLOPs   "
          f"total {summary['total_flops']:>12,} FLOPs")
saved = dense.ledger.attention_total - pruned.ledger.attention_total
print(f"adaptive pruning saved {saved:,} attention FLOPs "
      f"({saved / dense.ledger.attention_total:.1%})\n")

# Wall-clock per decode step. Interleave the variants so drift is shared,
# and pool steps across repetitions before computing steady-state stats.
dense_walls, pruned_walls = [], []
for _ in range(5):
    result = run(AdaptivePolicy(r=0.4, t=3))
    pruned_walls.extend(e.wall_time for e in result.events if e.step >= 2)
    result = run(None)
    dense_walls.extend(e.wall_time for e in result.events if e.step >= 2)

dense_stats = measure_latency(dense_walls)
pruned_stats = measure_latency(pruned_walls)
print("per-token latency over 5 repetitions (seconds):")
for name, stats in (("dense", dense_stats), ("adaptive", pruned_stats)):
    print(f"{name:9s} mean {stats['mean']:.2e}  median {stats['median']:.2e}  "
          f"p95 {stats['p95']:.2e}")
print(f"adaptive/dense mean ratio: {pruned_stats['mean'] / dense_stats['mean']:.3f}")
