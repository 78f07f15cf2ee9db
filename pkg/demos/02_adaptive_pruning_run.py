"""
An adaptive pruning run, step by step
=====================================

A seeded toy decoder generates from a mixed text/visual prompt while the
adaptive policy watches per-layer visual attention. When a majority of layers
see their average visual attention fall below sqrt(r) times its recorded
baseline, the cache drops to the top r fraction of visual tokens. The trace
below shows every decision.
"""

import numpy as np

from kvprune import (
    AdaptivePolicy,
    DecodeRequest,
    DecoderConfig,
    build_synthetic_prompt,
    decode,
    init_weights,
)

config = DecoderConfig(
    num_layers=4, num_heads=4, head_dim=16, hidden_dim=64,
    vocab_size=256, max_seq_len=512,
).validate()
weights = init_weights(config, seed=7)
tokens, roles = build_synthetic_prompt(
    text_count=16, visual_count=64, seed=11, vocab_size=256
)
request = DecodeRequest(
    tokens=tokens, roles=roles, max_new_tokens=24, stop_tokens=frozenset()
)

# r=0.4 keeps 40 percent of the remaining visual tokens per prune, with at
# most t=3 prunes per generation.
result = decode(request, weights, config, policy=AdaptivePolicy(r=0.4, t=3))

print("step  visual  votes  pruned  mean visual attention per layer")
for event in result.events:
    votes = "-" if event.vote_size is None else str(event.vote_size)
    mark = "yes" if event.prune_triggered else ""
    layer_avg = "  ".join(f"{a:.3f}" for a in event.avg_visual)
    print(f"{event.step:4d}  {event.visual_count:6d}  {votes:>5}  {mark:6}  {layer_avg}")

triggers = [e for e in result.events if e.prune_triggered]
print()
print(f"generated {len(result.tokens)} tokens; prunes at steps "
      f"{[e.step for e in triggers]}")
print(f"visual cache width followed {[result.events[0].visual_count] + [e.visual_count for e in triggers]}")

# Each prune carries a receipt of exactly which visual positions survived.
first = triggers[0]
print(f"layer 0 kept these visual slots at step {first.step}: "
      f"{first.kept_indices[0]}")
print(f"final cache: {result.cache.visual_count(0)} visual tokens of "
      f"{result.cache.n_v_initial} originally")
