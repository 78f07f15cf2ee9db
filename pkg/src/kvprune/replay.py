"""Re-run the adaptive policy's control decisions from a recorded trace.

No model forward happens here: the per-layer average visual attention
recorded at each step is treated as ground truth, and the vote / trigger /
schedule arithmetic is recomputed on top of it. The first mismatch against
what the trace recorded is reported; a clean trace reports none. This is the
cheap integrity check for traces produced elsewhere, and the oracle the
trigger tests lean on.
"""

from __future__ import annotations

from .errors import ContractViolation
from .kvcache import retained_count
from .policy import HISTORY_MODES, layer_vote
from .telemetry import AttentionHistory, TraceEvent, refresh_history

__all__ = ["replay_trace"]


def replay_trace(
    events: list[TraceEvent], r: float, t: int, history_mode: str = "prev-step"
) -> dict:
    """Compare recomputed trigger decisions against a recorded trace.

    Returns a report dict; report["diverged"] is False when every step's
    vote size, trigger flag, and post-decision visual count match.
    """
    if history_mode not in HISTORY_MODES:
        raise ContractViolation(f"replay: unknown history mode {history_mode!r}")
    if not events or events[0].step != 1:
        raise ContractViolation("replay: trace must start at step 1 (the prefill snapshot)")
    first = events[0]
    if first.prune_triggered:
        raise ContractViolation("replay: step 1 cannot record a prune")
    if any(v is None for v in first.avg_visual):
        raise ContractViolation("replay: step-1 averages undefined; not an adaptive trace")

    history = refresh_history(None, first.avg_visual, step=1)
    prev_avg = list(first.avg_visual)
    n = first.visual_count
    prune_cnt = 0
    pending_refresh = False
    triggers: list[int] = []

    def divergence(step: int, fld: str, expected, recorded) -> dict:
        return {
            "diverged": True,
            "step": step,
            "field": fld,
            "expected": expected,
            "recorded": recorded,
            "steps_checked": len(events),
            "triggers": triggers,
        }

    for event in events[1:]:
        m = event.step
        if pending_refresh:
            history = refresh_history(history, event.avg_visual, m)
            pending_refresh = False
        if prune_cnt >= t:
            expected_vote = None
            expected_trigger = False
        else:
            votes = layer_vote(event.avg_visual, history, r)
            expected_vote = len(votes)
            expected_trigger = (2 * len(votes) >= len(event.avg_visual)) or (m == 2)
        if event.vote_size != expected_vote:
            return divergence(m, "vote_size", expected_vote, event.vote_size)
        if event.prune_triggered != expected_trigger:
            return divergence(m, "prune_triggered", expected_trigger, event.prune_triggered)
        if expected_trigger:
            n = retained_count(n, r)
            prune_cnt += 1
            triggers.append(m)
            if history_mode == "prev-step":
                history = refresh_history(history, prev_avg, m - 1)
            else:
                pending_refresh = True
        if event.visual_count != n:
            return divergence(m, "visual_count", n, event.visual_count)
        prev_avg = list(event.avg_visual)

    return {"diverged": False, "steps_checked": len(events), "triggers": triggers}
