"""Decoding loops: greedy, nucleus, and beam search, with pruning interleaved.

Step indexing convention used everywhere: the last prefill forward is step 1
(its snapshot seeds the pruning history and its logits pick the first
generated token); the first generated-token forward is step 2. A policy
decision at step m is applied to the cache after step m's forward, so step
m+1 attends to the pruned cache.

Beam search semantics (deterministic, mirrored by the test oracle): after a
shared prefill, each round expands every live beam over the full vocabulary,
ranks candidates by cumulative log-probability (ties broken by parent beam
index, then token id), and keeps the best `width - finished` continuations.
A child retires when it emits a stop token or reaches the new-token budget.
The result is the retired beam with the highest cumulative log-probability.
Beams never share mutable state: caches, policies, recorders, and ledgers
are cloned at every fork.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .kvcache import Role, SegmentedKVCache
from .metrics import FlopsLedger
from .model import DecoderConfig, DecoderWeights, forward_step, prefill
from .numerics import make_rng, sample_top_p, softmax_row
from .policy import PruneDecision
from .telemetry import TraceEvent, TraceRecorder

__all__ = ["DecodeRequest", "DecodeResult", "BeamState", "decode", "build_synthetic_prompt"]

STRATEGIES = ("greedy", "nucleus", "beam")


@dataclass
class DecodeRequest:
    tokens: list[int]
    roles: list[Role]
    max_new_tokens: int
    strategy: str = "greedy"
    top_p: float = 1.0
    sample_seed: int = 0
    beam_width: int = 1
    stop_tokens: frozenset = frozenset({0})

    def validate(self, config: DecoderConfig) -> "DecodeRequest":
        if self.strategy not in STRATEGIES:
            raise ContractViolation(f"decode: unknown strategy {self.strategy!r}")
        if self.max_new_tokens < 1:
            raise ContractViolation("decode: max_new_tokens must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ContractViolation(f"decode: top_p must be in (0, 1], got {self.top_p}")
        if self.beam_width < 1:
            raise ContractViolation("decode: beam width must be >= 1")
        if self.beam_width > config.vocab_size:
            raise ContractViolation(
                f"decode: beam width {self.beam_width} exceeds vocab {config.vocab_size}"
            )
        if len(self.tokens) != len(self.roles):
            raise ContractViolation("decode: prompt tokens and roles must align")
        if len(self.tokens) + self.max_new_tokens > config.max_seq_len:
            raise ContractViolation(
                f"decode: prompt {len(self.tokens)} + new {self.max_new_tokens} "
                f"overflows max_seq_len {config.max_seq_len}"
            )
        return self


@dataclass
class DecodeResult:
    tokens: list[int]  # generated tokens only
    events: list[TraceEvent]
    cache: SegmentedKVCache
    ledger: FlopsLedger
    logprob: float | None = None  # cumulative, beam strategy only


@dataclass
class BeamState:
    cache: SegmentedKVCache
    policy: object
    recorder: TraceRecorder
    ledger: FlopsLedger
    tokens: list[int] = field(default_factory=list)
    logprob: float = 0.0

    def fork(self) -> "BeamState":
        return BeamState(
            cache=self.cache.clone(),
            policy=self.policy.clone() if self.policy is not None else None,
            recorder=self.recorder.fork(),
            ledger=self.ledger.clone(),
            tokens=list(self.tokens),
            logprob=self.logprob,
        )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    m = np.max(x)
    return x - (m + np.log(np.sum(np.exp(x - m))))


def _make_selector(request: DecodeRequest):
    if request.strategy == "nucleus":
        rng = make_rng(request.sample_seed)

        def select(logits: np.ndarray) -> int:
            probs = softmax_row(logits.astype(np.float64))
            return sample_top_p(probs, request.top_p, rng)

        return select
    return lambda logits: int(np.argmax(logits))


def _policy_step(policy, cache, snapshot, m):
    """Run the policy, apply a triggered prune, return (decision, receipt)."""
    if policy is None:
        return PruneDecision(trigger=False), None
    decision = policy.step(snapshot, m)
    receipt = cache.prune_all(decision.keep, step=m) if decision.trigger else None
    return decision, receipt


def decode(
    request: DecodeRequest,
    weights: DecoderWeights,
    config: DecoderConfig,
    policy=None,
    intervention=None,
    trace_sink=None,
    trace_meta: dict | None = None,
) -> DecodeResult:
    """Generate tokens from a role-tagged prompt under a pruning policy.

    The amplification intervention, when given, applies to generated-token
    forwards only; the prefill stays untouched so the recorded step-1
    attention is the model's own.
    """
    request.validate(config)
    if request.strategy == "beam":
        return _decode_beam(request, weights, config, policy, intervention, trace_sink, trace_meta)

    cache = SegmentedKVCache(
        config.num_layers, config.hidden_dim, capacity=len(request.tokens) + request.max_new_tokens
    )
    ledger = FlopsLedger(config)
    recorder = TraceRecorder(sink=trace_sink, meta=trace_meta)
    select = _make_selector(request)

    t0 = time.perf_counter()
    logits, snapshot = prefill(weights, config, cache, request.tokens, request.roles)
    prefill_wall = time.perf_counter() - t0
    if policy is not None:
        policy.observe_prefill(snapshot)
    ledger.record_prefill(len(request.tokens))
    recorder.record_step(
        snapshot, None, vote_size=None,
        attn_flops_cum=ledger.attention_total, wall_time=prefill_wall,
    )

    generated = [select(logits)]
    position = len(request.tokens)
    m = 1
    while generated[-1] not in request.stop_tokens and len(generated) < request.max_new_tokens:
        m += 1
        t0 = time.perf_counter()
        logits, snapshot = forward_step(
            weights, config, cache, generated[-1], position, step=m,
            role=Role.GENERATED, intervention=intervention,
        )
        wall = time.perf_counter() - t0
        ledger.record(m, cache.lengths)
        decision, receipt = _policy_step(policy, cache, snapshot, m)
        recorder.record_step(
            snapshot, receipt, vote_size=decision.vote_size,
            attn_flops_cum=ledger.attention_total, wall_time=wall,
        )
        generated.append(select(logits))
        position += 1
    return DecodeResult(tokens=generated, events=recorder.events, cache=cache, ledger=ledger)


def _decode_beam(
    request, weights, config, policy, intervention, trace_sink, trace_meta
) -> DecodeResult:
    width = request.beam_width
    cache = SegmentedKVCache(
        config.num_layers, config.hidden_dim, capacity=len(request.tokens) + request.max_new_tokens
    )
    ledger = FlopsLedger(config)
    recorder = TraceRecorder(sink=None)

    t0 = time.perf_counter()
    logits, snapshot = prefill(weights, config, cache, request.tokens, request.roles)
    prefill_wall = time.perf_counter() - t0
    if policy is not None:
        policy.observe_prefill(snapshot)
    ledger.record_prefill(len(request.tokens))
    recorder.record_step(
        snapshot, None, vote_size=None,
        attn_flops_cum=ledger.attention_total, wall_time=prefill_wall,
    )

    root = BeamState(cache=cache, policy=policy, recorder=recorder, ledger=ledger)
    logp = _log_softmax(logits)
    order = sorted(range(config.vocab_size), key=lambda tok: (-logp[tok], tok))[:width]
    beams: list[BeamState] = []
    finished: list[BeamState] = []
    for tok in order:
        child = root.fork()
        child.tokens.append(tok)
        child.logprob = float(logp[tok])
        if tok in request.stop_tokens or request.max_new_tokens == 1:
            finished.append(child)
        else:
            beams.append(child)

    m = 1
    position = len(request.tokens)
    while beams:
        m += 1
        candidates = []  # (neg cumulative logprob, parent index, token)
        for b_idx, beam in enumerate(beams):
            t0 = time.perf_counter()
            logits, snapshot = forward_step(
                weights, config, beam.cache, beam.tokens[-1], position, step=m,
                role=Role.GENERATED, intervention=intervention,
            )
            wall = time.perf_counter() - t0
            beam.ledger.record(m, beam.cache.lengths)
            decision, receipt = _policy_step(beam.policy, beam.cache, snapshot, m)
            beam.recorder.record_step(
                snapshot, receipt, vote_size=decision.vote_size,
                attn_flops_cum=beam.ledger.attention_total, wall_time=wall,
            )
            logp = _log_softmax(logits)
            for tok in range(config.vocab_size):
                candidates.append((-(beam.logprob + logp[tok]), b_idx, tok))
        candidates.sort()
        survivors = []
        for neg_lp, b_idx, tok in candidates[: width - len(finished)]:
            child = beams[b_idx].fork()
            child.tokens.append(tok)
            child.logprob = -neg_lp
            if tok in request.stop_tokens or len(child.tokens) >= request.max_new_tokens:
                finished.append(child)
            else:
                survivors.append(child)
        beams = survivors
        position += 1

    winner = max(finished, key=lambda b: b.logprob)
    if trace_sink is not None:
        winner.recorder.dump(trace_sink, meta=trace_meta)
    return DecodeResult(
        tokens=winner.tokens, events=winner.recorder.events,
        cache=winner.cache, ledger=winner.ledger, logprob=winner.logprob,
    )


def build_synthetic_prompt(
    text_count: int, visual_count: int, seed: int, vocab_size: int
) -> tuple[list[int], list[Role]]:
    """Seeded toy prompt: text ids then visual ids, as (tokens, roles).

    Visual tokens come from the reserved top quarter of the vocab so role
    tags and id ranges agree; text tokens avoid id 0, the default stop token.
    """
    if vocab_size < 8:
        raise ContractViolation("build_synthetic_prompt: vocab too small for reserved ranges")
    if text_count < 0 or visual_count < 0 or text_count + visual_count < 1:
        raise ContractViolation("build_synthetic_prompt: need at least one prompt token")
    visual_base = vocab_size - vocab_size // 4
    rng = make_rng(seed)
    text = rng.integers(1, visual_base, size=text_count)
    visual = rng.integers(visual_base, vocab_size, size=visual_count)
    tokens = [int(t) for t in text] + [int(v) for v in visual]
    roles = [Role.PROMPT_TEXT] * text_count + [Role.VISUAL] * visual_count
    return tokens, roles
