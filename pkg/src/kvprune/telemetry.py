"""Per-step trace recording and the attention-history baseline.

The recorder captures, for every decoding step, the per-layer average visual
attention plus the pruning decision made on it. Traces are line-buffered
JSONL (schema "kvprune-trace/1"): one header object, then one object per
step, flushed as written so a crashed run still leaves a readable prefix.
A CSV exporter emits one row per (step, layer) for external plotting.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

from .errors import ContractViolation, FormatError
from .kvcache import PruneReceipt
from .model import AttentionSnapshot

__all__ = [
    "SCHEMA",
    "AttentionHistory",
    "TraceEvent",
    "TraceRecorder",
    "refresh_history",
    "load_trace",
    "export_csv",
    "merge_traces",
]

SCHEMA = "kvprune-trace/1"


@dataclass(frozen=True)
class AttentionHistory:
    """Per-layer scalar baseline of average visual attention."""

    values: tuple[float, ...]
    refreshed_at: int

    def __post_init__(self):
        for i, v in enumerate(self.values):
            if not 0.0 <= v <= 1.0:
                raise ContractViolation(f"history: layer {i} baseline {v} outside [0, 1]")


def refresh_history(history: AttentionHistory | None, values, step: int) -> AttentionHistory:
    """Replace the baseline wholesale with `values`, recording the step."""
    vals = tuple(float(v) for v in values)
    if history is not None and len(vals) != len(history.values):
        raise ContractViolation(
            f"refresh_history: got {len(vals)} layers, history has {len(history.values)}"
        )
    return AttentionHistory(values=vals, refreshed_at=step)


@dataclass
class TraceEvent:
    step: int
    avg_visual: list[float | None]
    vote_size: int | None  # None when no vote was evaluated at this step
    prune_triggered: bool
    prune_cnt: int  # after this step's decision
    visual_count: int  # per-layer visual tokens after this step's decision
    kept_indices: list[list[int]] | None  # into the pre-prune visual segment
    attn_flops_cum: int
    wall_time: float


class TraceRecorder:
    """Appends TraceEvents in step order, mirroring them to a JSONL sink."""

    def __init__(self, sink=None, meta: dict | None = None):
        self.events: list[TraceEvent] = []
        self._sink = sink
        self._last_step = 0
        self._prune_cnt = 0
        if sink is not None:
            header = {"schema": SCHEMA}
            header.update(meta or {})
            sink.write(json.dumps(header) + "\n")
            sink.flush()

    def record_step(
        self,
        snapshot: AttentionSnapshot,
        receipt: PruneReceipt | None = None,
        *,
        vote_size: int | None = None,
        attn_flops_cum: int = 0,
        wall_time: float = 0.0,
    ) -> TraceEvent:
        if snapshot.step <= self._last_step:
            raise ContractViolation(
                f"record_step: step {snapshot.step} not after last recorded {self._last_step}"
            )
        triggered = receipt is not None
        if triggered:
            self._prune_cnt += 1
            visual_count = len(receipt.layers[0].kept)
            kept = [list(lp.kept) for lp in receipt.layers]
        else:
            visual_count = len(snapshot.visual[0]) if snapshot.visual else 0
            kept = None
        event = TraceEvent(
            step=snapshot.step,
            avg_visual=list(snapshot.avg_visual),
            vote_size=vote_size,
            prune_triggered=triggered,
            prune_cnt=self._prune_cnt,
            visual_count=visual_count,
            kept_indices=kept,
            attn_flops_cum=int(attn_flops_cum),
            wall_time=float(wall_time),
        )
        self.events.append(event)
        self._last_step = snapshot.step
        if self._sink is not None:
            self._sink.write(json.dumps(asdict(event)) + "\n")
            self._sink.flush()
        return event

    def fork(self) -> "TraceRecorder":
        """Sink-less copy for beam forks; events so far are shared history."""
        dup = TraceRecorder(sink=None)
        dup.events = list(self.events)
        dup._last_step = self._last_step
        dup._prune_cnt = self._prune_cnt
        return dup

    def dump(self, sink, meta: dict | None = None) -> None:
        """Serialize all recorded events to a fresh sink after the fact."""
        header = {"schema": SCHEMA}
        header.update(meta or {})
        sink.write(json.dumps(header) + "\n")
        for event in self.events:
            sink.write(json.dumps(asdict(event)) + "\n")
        sink.flush()


def load_trace(path) -> tuple[dict, list[TraceEvent]]:
    """Parse a trace file back into (header metadata, events)."""
    with open(path, "r", encoding="utf-8") as fp:
        lines = [line for line in fp if line.strip()]
    if not lines:
        raise FormatError("trace file is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"trace header is not valid JSON: {exc}") from exc
    if header.get("schema") != SCHEMA:
        raise FormatError(f"trace schema {header.get('schema')!r} != {SCHEMA!r}")
    events = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            raw = json.loads(line)
            events.append(TraceEvent(**raw))
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"trace line {lineno} is malformed: {exc}") from exc
    return header, events


def export_csv(events: list[TraceEvent], fp) -> None:
    """One row per (step, layer); kept_count is empty on non-prune steps."""
    writer = csv.writer(fp)
    writer.writerow(
        ["step", "layer", "avg_visual", "vote_size", "prune_triggered",
         "prune_cnt", "visual_count", "kept_count", "attn_flops_cum", "wall_time"]
    )
    for ev in events:
        for layer, avg in enumerate(ev.avg_visual):
            kept = len(ev.kept_indices[layer]) if ev.kept_indices is not None else ""
            writer.writerow(
                [ev.step, layer, "" if avg is None else repr(avg),
                 "" if ev.vote_size is None else ev.vote_size,
                 int(ev.prune_triggered), ev.prune_cnt, ev.visual_count,
                 kept, ev.attn_flops_cum, repr(ev.wall_time)]
            )


def merge_traces(named: list[tuple[str, list[TraceEvent]]]) -> list[tuple[str, TraceEvent]]:
    """Interleave several runs' events by step, name as tiebreak."""
    flat = [(ev.step, name, ev) for name, events in named for ev in events]
    flat.sort(key=lambda item: (item[0], item[1]))
    return [(name, ev) for _, name, ev in flat]
