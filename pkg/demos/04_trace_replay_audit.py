"""
Auditing a trace by replaying its decisions
===========================================

A recorded trace carries enough state to recompute every pruning decision
without the model: per-layer visual attention, vote counts, trigger flags,
cache widths. The replayer reruns the decision arithmetic and flags the first
step where the recording disagrees. A clean run verifies; a tampered one is
caught at the exact step and field.
"""

import dataclasses
import math

from kvprune import (
    AdaptivePolicy,
    DecodeRequest,
    DecoderConfig,
    build_synthetic_prompt,
    decode,
    init_weights,
    replay_trace,
)

config = DecoderConfig(
    num_layers=4, num_heads=4, head_dim=16, hidden_dim=64,
    vocab_size=256, max_seq_len=512,
).validate()
weights = init_weights(config, 7)
tokens, roles = build_synthetic_prompt(16, 64, seed=11, vocab_size=256)
request = DecodeRequest(
    tokens=tokens, roles=roles, max_new_tokens=40, stop_tokens=frozenset()
)
result = decode(request, weights, config, policy=AdaptivePolicy(r=0.4, t=3))

report = replay_trace(result.events, r=0.4, t=3)
print("clean trace:", report)

# Replaying with the wrong keep ratio diverges as soon as the arithmetic does.
report = replay_trace(result.events, r=0.9, t=3)
print("wrong ratio:", {k: report[k] for k in ("diverged", "step", "field")})

# Flip one trigger flag in a copy of the trace. The replayer pinpoints it.
tampered = list(result.events)
for idx, event in enumerate(tampered):
    if event.prune_triggered:
        tampered[idx] = dataclasses.replace(event, prune_triggered=False)
        break
report = replay_trace(tampered, r=0.4, t=3)
print("tampered flag:", {k: report[k] for k in ("diverged", "step", "field")})

# Nudge one layer's recorded attention across its voting threshold. The vote
# count recomputes one higher than the recording claims.
events = [dataclasses.replace(e, avg_visual=list(e.avg_visual)) for e in result.events]
baseline = events[0].avg_visual[0]
for event in events:
    if event.step < 3 or event.vote_size is None or event.prune_triggered:
        continue
    threshold = math.sqrt(0.4) * baseline
    if event.avg_visual[0] >= threshold:
        event.avg_visual[0] = threshold * 0.999
        break
report = replay_trace(events, r=0.4, t=3)
print("forged vote: ", {k: report[k] for k in ("diverged", "step", "field", "expected", "recorded")})
