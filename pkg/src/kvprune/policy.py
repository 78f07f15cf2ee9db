"""Visual-token pruning policies and the attention amplification intervention.

All policies consume only head-averaged last-token attention snapshots and
emit keep-index decisions; they never touch logits, so they compose with any
decoding strategy. Implemented policies:

  none          keep everything
  fixed_topk    prune once at step 2 to the k most-attended visual tokens,
                ranked by the prefill-step attention row
  adaptive      multi-round pruning driven by per-layer votes on declining
                average visual attention
  random_keep   one-shot ablation: keep k visual tokens uniformly at random
  bottom_k      one-shot ablation: keep the k least-attended visual tokens

The adaptive policy votes per layer: layer i votes when its current average
visual attention falls strictly below sqrt(r) times its history baseline.
A majority of layers (or step 2 unconditionally) triggers a prune to
retained_count(n, r) tokens per layer, consuming one unit of budget t.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .kvcache import retained_count
from .model import AttentionSnapshot
from .numerics import make_rng
from .telemetry import AttentionHistory, refresh_history

__all__ = [
    "PruneDecision",
    "PruneState",
    "AttentionIntervention",
    "apply_intervention",
    "topk_select",
    "bottomk_select",
    "layer_vote",
    "adaptive_step",
    "fixed_topk_step",
    "random_keep_step",
    "bottomk_step",
    "NoPrune",
    "FixedTopK",
    "AdaptivePolicy",
    "RandomKeep",
    "BottomK",
    "make_policy",
]

HISTORY_MODES = ("prev-step", "post-prune-step")


# -- selection primitives -----------------------------------------------------


def _check_k(k: int, length: int) -> None:
    if k <= 0 or k > length:
        raise ContractViolation(f"selection needs 0 < k <= {length}, got {k}")


def topk_select(values, k: int) -> list[int]:
    """Indices of the k largest entries, ascending; ties go to the lower index."""
    vals = np.asarray(values, dtype=np.float64)
    _check_k(k, vals.size)
    # Stable sort on negated values keeps original order among equals.
    order = np.argsort(-vals, kind="stable")[:k]
    return sorted(int(i) for i in order)


def bottomk_select(values, k: int) -> list[int]:
    """Indices of the k smallest entries, ascending; ties go to the lower index."""
    vals = np.asarray(values, dtype=np.float64)
    _check_k(k, vals.size)
    order = np.argsort(vals, kind="stable")[:k]
    return sorted(int(i) for i in order)


def layer_vote(current: list[float | None], history: AttentionHistory, r: float) -> list[int]:
    """Layers whose average visual attention fell below sqrt(r) of baseline."""
    if len(current) != len(history.values):
        raise ContractViolation(
            f"layer_vote: {len(current)} current layers vs {len(history.values)} baselines"
        )
    if not 0.0 < r < 1.0:
        raise ContractViolation(f"layer_vote: r must be in (0, 1), got {r}")
    threshold_scale = math.sqrt(r)
    votes = []
    for i, (cur, base) in enumerate(zip(current, history.values)):
        if cur is None:
            raise ContractViolation(f"layer_vote: layer {i} average is undefined")
        if cur < threshold_scale * base:  # strict: boundary equality does not vote
            votes.append(i)
    return votes


# -- decision types ------------------------------------------------------------


@dataclass
class PruneDecision:
    trigger: bool
    keep: list[list[int]] = field(default_factory=list)  # per layer, empty when not triggered
    vote_size: int | None = None


@dataclass
class PruneState:
    """Mutable adaptive-policy state; one instance per decoding stream."""

    r: float
    t: int
    prune_cnt: int = 0
    n: int = 0  # remaining visual tokens per layer
    history: AttentionHistory | None = None
    prev_avg: list[float] | None = None  # last step's averages, for prev-step refresh
    history_mode: str = "prev-step"
    shared_indices: bool = False
    pending_refresh: bool = False  # post-prune-step mode: refresh due at next snapshot

    def __post_init__(self):
        if not 0.0 < self.r < 1.0:
            raise ContractViolation(f"policy: r must be in (0, 1), got {self.r}")
        if self.t < 1:
            raise ContractViolation(f"policy: budget t must be >= 1, got {self.t}")
        if self.history_mode not in HISTORY_MODES:
            raise ContractViolation(f"policy: unknown history mode {self.history_mode!r}")


def _snapshot_visual_rows(snapshot: AttentionSnapshot, expect_n: int | None) -> list[np.ndarray]:
    rows = snapshot.visual
    if expect_n is not None:
        for i, row in enumerate(rows):
            if row.size != expect_n:
                raise ContractViolation(
                    f"policy: layer {i} has {row.size} visual tokens, state says {expect_n}"
                )
    return rows


def _keep_lists(rows: list[np.ndarray], k: int, shared: bool, selector=topk_select) -> list[list[int]]:
    if shared:
        # One keep set for all layers, ranked on the layer-averaged row.
        stacked = np.mean(np.stack([r.astype(np.float64) for r in rows]), axis=0)
        keep = selector(stacked, k)
        return [list(keep) for _ in rows]
    return [selector(row, k) for row in rows]


def adaptive_step(state: PruneState, snapshot: AttentionSnapshot, m: int) -> PruneDecision:
    """One control step of the adaptive policy; mutates `state`.

    Order matters and follows the driving loop: budget check first, then the
    layer vote; step 2 triggers unconditionally. The forced step-2 prune
    consumes budget like any other.
    """
    if m < 2:
        raise ContractViolation(f"adaptive_step: first decision step is 2, got {m}")
    if state.history is None:
        raise ContractViolation("adaptive_step: history not initialized from the prefill step")

    if state.pending_refresh:
        # post-prune-step mode: fold in the first post-prune averages before voting.
        state.history = refresh_history(state.history, snapshot.avg_visual, m)
        state.pending_refresh = False

    if state.prune_cnt >= state.t:
        state.prev_avg = [float(v) for v in snapshot.avg_visual]
        return PruneDecision(trigger=False, vote_size=None)

    votes = layer_vote(snapshot.avg_visual, state.history, state.r)
    n_layers = len(snapshot.avg_visual)
    trigger = (2 * len(votes) >= n_layers) or (m == 2)
    decision = PruneDecision(trigger=trigger, vote_size=len(votes))
    if trigger:
        rows = _snapshot_visual_rows(snapshot, state.n)
        k = retained_count(state.n, state.r)
        decision.keep = _keep_lists(rows, k, state.shared_indices)
        state.prune_cnt += 1
        state.n = k
        if state.history_mode == "prev-step":
            # Baseline becomes the step before the trigger, per the update rule.
            state.history = refresh_history(state.history, state.prev_avg, m - 1)
        else:
            state.pending_refresh = True
    state.prev_avg = [float(v) for v in snapshot.avg_visual]
    return decision


def fixed_topk_step(k: int, step1_rows: list[np.ndarray], m: int, already_pruned: bool) -> PruneDecision:
    """One-shot prune at step 2, keeping the k most-attended prefill tokens."""
    if m < 2:
        raise ContractViolation(f"fixed_topk_step: first decision step is 2, got {m}")
    if already_pruned or m != 2:
        return PruneDecision(trigger=False)
    n_v = step1_rows[0].size
    if not 0 < k < n_v:
        raise ContractViolation(f"fixed_topk_step: need 0 < k < {n_v}, got {k}")
    return PruneDecision(trigger=True, keep=[topk_select(row, k) for row in step1_rows])


def random_keep_step(
    k: int, step1_rows: list[np.ndarray], m: int, already_pruned: bool, rng: np.random.Generator
) -> PruneDecision:
    """One-shot prune at step 2, keeping k uniform-random visual tokens."""
    if m < 2:
        raise ContractViolation(f"random_keep_step: first decision step is 2, got {m}")
    if already_pruned or m != 2:
        return PruneDecision(trigger=False)
    n_v = step1_rows[0].size
    if not 0 < k < n_v:
        raise ContractViolation(f"random_keep_step: need 0 < k < {n_v}, got {k}")
    keep = [sorted(int(i) for i in rng.choice(n_v, size=k, replace=False)) for _ in step1_rows]
    return PruneDecision(trigger=True, keep=keep)


def bottomk_step(k: int, step1_rows: list[np.ndarray], m: int, already_pruned: bool) -> PruneDecision:
    """One-shot prune at step 2, keeping the k least-attended prefill tokens.

    Mirrors fixed_topk_step on the same prefill-step signal, so the pair
    isolates the effect of which end of the attention ranking survives.
    """
    if m < 2:
        raise ContractViolation(f"bottomk_step: first decision step is 2, got {m}")
    if already_pruned or m != 2:
        return PruneDecision(trigger=False)
    n_v = step1_rows[0].size
    if not 0 < k < n_v:
        raise ContractViolation(f"bottomk_step: need 0 < k < {n_v}, got {k}")
    return PruneDecision(trigger=True, keep=[bottomk_select(row, k) for row in step1_rows])


# -- attention intervention -----------------------------------------------------


@dataclass(frozen=True)
class AttentionIntervention:
    """Post-softmax scaling of the visual segment in the last token's row."""

    mode: str = "none"  # none | amplify_visual
    factor: float = 1.0
    renormalize: bool = True

    def __post_init__(self):
        if self.mode not in ("none", "amplify_visual"):
            raise ContractViolation(f"intervention: unknown mode {self.mode!r}")
        if not (np.isfinite(self.factor) and self.factor > 0):
            raise ContractViolation(f"intervention: factor must be positive, got {self.factor}")

    def apply(self, row: np.ndarray, visual_mask: np.ndarray) -> np.ndarray:
        return apply_intervention(row, visual_mask, self)


def apply_intervention(row: np.ndarray, visual_mask: np.ndarray, iv: AttentionIntervention) -> np.ndarray:
    """Scale visual entries of a probability row by iv.factor, then renormalize.

    mode="none" or factor=1 returns the input object untouched (bit-level
    no-op). With renormalize=False the scaled row is returned as-is, which no
    longer sums to 1; that variant reproduces raw doubling without repair.
    """
    if iv.mode == "none" or iv.factor == 1.0:
        return row
    if visual_mask.shape != row.shape:
        raise ContractViolation(
            f"apply_intervention: mask shape {visual_mask.shape} != row shape {row.shape}"
        )
    out = row.copy()
    out[visual_mask] = out[visual_mask] * iv.factor
    if iv.renormalize:
        total = float(np.sum(out, dtype=np.float64))
        out = (out / total).astype(row.dtype, copy=False)
    return out


# -- policy objects ---------------------------------------------------------------


class NoPrune:
    """Keeps the cache intact; every decision is a non-trigger."""

    name = "none"

    def observe_prefill(self, snapshot: AttentionSnapshot) -> None:
        pass

    def step(self, snapshot: AttentionSnapshot, m: int) -> PruneDecision:
        return PruneDecision(trigger=False)

    def clone(self) -> "NoPrune":
        return NoPrune()


class _OneShot:
    """Shared plumbing for the single-prune policies driven by prefill attention."""

    def __init__(self, k: int):
        if k < 1:
            raise ContractViolation(f"policy: k must be >= 1, got {k}")
        self.k = k
        self.step1_rows: list[np.ndarray] | None = None
        self.done = False

    def observe_prefill(self, snapshot: AttentionSnapshot) -> None:
        self.step1_rows = [row.copy() for row in snapshot.visual]

    def _rows(self) -> list[np.ndarray]:
        if self.step1_rows is None:
            raise ContractViolation(f"{self.name}: policy never saw the prefill snapshot")
        return self.step1_rows

    def _after(self, decision: PruneDecision) -> PruneDecision:
        if decision.trigger:
            self.done = True
        return decision

    def _copy_into(self, dup: "_OneShot") -> None:
        dup.step1_rows = None if self.step1_rows is None else [r.copy() for r in self.step1_rows]
        dup.done = self.done


class FixedTopK(_OneShot):
    name = "fixed_topk"

    def step(self, snapshot: AttentionSnapshot, m: int) -> PruneDecision:
        return self._after(fixed_topk_step(self.k, self._rows(), m, self.done))

    def clone(self) -> "FixedTopK":
        dup = FixedTopK(self.k)
        self._copy_into(dup)
        return dup


class BottomK(_OneShot):
    name = "bottom_k"

    def step(self, snapshot: AttentionSnapshot, m: int) -> PruneDecision:
        return self._after(bottomk_step(self.k, self._rows(), m, self.done))

    def clone(self) -> "BottomK":
        dup = BottomK(self.k)
        self._copy_into(dup)
        return dup


class RandomKeep(_OneShot):
    name = "random_keep"

    def __init__(self, k: int, seed: int = 0):
        super().__init__(k)
        self.seed = seed
        self.rng = make_rng(seed)

    def step(self, snapshot: AttentionSnapshot, m: int) -> PruneDecision:
        return self._after(random_keep_step(self.k, self._rows(), m, self.done, self.rng))

    def clone(self) -> "RandomKeep":
        dup = RandomKeep(self.k, self.seed)
        self._copy_into(dup)
        dup.rng = copy.deepcopy(self.rng)
        return dup


class AdaptivePolicy:
    """Vote-driven multi-round pruning with a per-run budget."""

    name = "adaptive"

    def __init__(
        self,
        r: float,
        t: int,
        history_mode: str = "prev-step",
        shared_indices: bool = False,
    ):
        self.state = PruneState(r=r, t=t, history_mode=history_mode, shared_indices=shared_indices)

    def observe_prefill(self, snapshot: AttentionSnapshot) -> None:
        for i, v in enumerate(snapshot.avg_visual):
            if v is None:
                raise ContractViolation(f"adaptive: layer {i} has no visual tokens at prefill")
        self.state.history = refresh_history(None, snapshot.avg_visual, step=1)
        self.state.prev_avg = [float(v) for v in snapshot.avg_visual]
        self.state.n = len(snapshot.visual[0])

    def step(self, snapshot: AttentionSnapshot, m: int) -> PruneDecision:
        return adaptive_step(self.state, snapshot, m)

    def clone(self) -> "AdaptivePolicy":
        dup = AdaptivePolicy.__new__(AdaptivePolicy)
        dup.state = copy.deepcopy(self.state)
        return dup


def make_policy(
    kind: str,
    *,
    r: float = 0.4,
    t: int = 3,
    k: int = 1,
    seed: int = 0,
    history_mode: str = "prev-step",
    shared_indices: bool = False,
):
    """Instantiate a policy by its config-file name."""
    if kind == "none":
        return NoPrune()
    if kind == "fixed_topk":
        return FixedTopK(k)
    if kind == "adaptive":
        return AdaptivePolicy(r, t, history_mode=history_mode, shared_indices=shared_indices)
    if kind == "random_keep":
        return RandomKeep(k, seed)
    if kind == "bottom_k":
        return BottomK(k)
    raise ContractViolation(f"unknown policy kind {kind!r}")
