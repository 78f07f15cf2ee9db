"""Trace recording, history baseline, and the trace file round-trip."""

import csv
import io
import json

import numpy as np
import pytest

from kvprune import (
    AttentionHistory,
    AttentionSnapshot,
    ContractViolation,
    FormatError,
    PruneReceipt,
    TraceRecorder,
    refresh_history,
)
from kvprune.kvcache import LayerPrune
from kvprune.telemetry import SCHEMA, export_csv, load_trace, merge_traces


def snap(step, avgs, vis_len=4):
    layers = len(avgs)
    return AttentionSnapshot(
        step=step,
        text=[np.zeros(2) for _ in range(layers)],
        visual=[np.full(vis_len, a if a is not None else 0.0) for a in avgs],
        generated=[np.zeros(0) for _ in range(layers)],
        avg_visual=list(avgs),
    )


def receipt(step, kept_per_layer):
    rec = PruneReceipt(step=step)
    for kept in kept_per_layer:
        removed = [i for i in range(max(kept) + 2) if i not in kept] if kept else []
        rec.layers.append(LayerPrune(kept=list(kept), removed=removed, kept_original=list(kept)))
    return rec


# ---------------------------------------------------------------------------
# history


def test_history_refresh_replaces_values():
    h1 = refresh_history(None, [0.5, 0.25], step=1)
    assert h1.values == (0.5, 0.25)
    assert h1.refreshed_at == 1
    h2 = refresh_history(h1, [0.1, 0.2], step=4)
    assert h2.values == (0.1, 0.2)
    assert h2.refreshed_at == 4
    assert h1.values == (0.5, 0.25)  # frozen, not mutated


def test_history_validates_range_and_shape():
    with pytest.raises(ContractViolation):
        AttentionHistory(values=(1.5,), refreshed_at=1)
    with pytest.raises(ContractViolation):
        AttentionHistory(values=(-0.1,), refreshed_at=1)
    h = refresh_history(None, [0.5, 0.5], step=1)
    with pytest.raises(ContractViolation):
        refresh_history(h, [0.5], step=2)


# ---------------------------------------------------------------------------
# recorder


def test_recorder_tracks_prune_count_and_visual_count():
    rec = TraceRecorder()
    e1 = rec.record_step(snap(1, [0.5, 0.5], vis_len=6))
    assert (e1.prune_triggered, e1.prune_cnt, e1.visual_count) == (False, 0, 6)
    assert e1.kept_indices is None
    e2 = rec.record_step(snap(2, [0.4, 0.4], vis_len=6), receipt(2, [[0, 2], [1, 3]]), vote_size=2)
    assert (e2.prune_triggered, e2.prune_cnt, e2.visual_count) == (True, 1, 2)
    assert e2.kept_indices == [[0, 2], [1, 3]]
    e3 = rec.record_step(snap(3, [0.3, 0.3], vis_len=2), vote_size=1)
    assert (e3.prune_triggered, e3.prune_cnt, e3.visual_count) == (False, 1, 2)


def test_recorder_rejects_out_of_order_steps():
    rec = TraceRecorder()
    rec.record_step(snap(2, [0.5]))
    with pytest.raises(ContractViolation):
        rec.record_step(snap(2, [0.5]))
    with pytest.raises(ContractViolation):
        rec.record_step(snap(1, [0.5]))


def test_recorder_streams_jsonl_with_header():
    buf = io.StringIO()
    rec = TraceRecorder(sink=buf, meta={"policy": "adaptive", "r": 0.4})
    rec.record_step(snap(1, [0.5, None]), attn_flops_cum=1234, wall_time=0.5)
    lines = buf.getvalue().splitlines()
    header = json.loads(lines[0])
    assert header["schema"] == SCHEMA
    assert header["policy"] == "adaptive"
    body = json.loads(lines[1])
    assert body["step"] == 1
    assert body["avg_visual"] == [0.5, None]
    assert body["attn_flops_cum"] == 1234


def test_fork_is_isolated_but_shares_past():
    rec = TraceRecorder()
    rec.record_step(snap(1, [0.5]))
    dup = rec.fork()
    dup.record_step(snap(2, [0.4]))
    assert len(rec.events) == 1
    assert len(dup.events) == 2
    assert dup.events[0] is rec.events[0]
    rec.record_step(snap(2, [0.3]))
    assert len(dup.events) == 2


def test_trace_round_trip_field_for_field(tmp_path):
    path = tmp_path / "trace.jsonl"
    with open(path, "w") as fp:
        rec = TraceRecorder(sink=fp, meta={"run": "x"})
        rec.record_step(snap(1, [0.123456789012345, 0.5]), attn_flops_cum=10, wall_time=0.25)
        rec.record_step(
            snap(2, [0.1, 0.2]), receipt(2, [[0], [1]]), vote_size=2,
            attn_flops_cum=20, wall_time=0.5,
        )
    header, events = load_trace(path)
    assert header["run"] == "x"
    assert [e.step for e in events] == [1, 2]
    for got, want in zip(events, rec.events):
        assert got == want  # dataclass equality covers every field exactly


def test_load_trace_rejects_bad_files(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(FormatError):
        load_trace(empty)
    bad_schema = tmp_path / "schema.jsonl"
    bad_schema.write_text('{"schema": "other/9"}\n')
    with pytest.raises(FormatError):
        load_trace(bad_schema)
    bad_line = tmp_path / "line.jsonl"
    bad_line.write_text(json.dumps({"schema": SCHEMA}) + "\n{not json\n")
    with pytest.raises(FormatError):
        load_trace(bad_line)
    bad_fields = tmp_path / "fields.jsonl"
    bad_fields.write_text(json.dumps({"schema": SCHEMA}) + '\n{"step": 1}\n')
    with pytest.raises(FormatError):
        load_trace(bad_fields)


def test_export_csv_one_row_per_step_layer():
    rec = TraceRecorder()
    rec.record_step(snap(1, [0.5, 0.25]))
    rec.record_step(snap(2, [0.4, 0.2]), receipt(2, [[0, 1], [0, 2]]), vote_size=2)
    buf = io.StringIO()
    export_csv(rec.events, buf)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0][:4] == ["step", "layer", "avg_visual", "vote_size"]
    assert len(rows) == 1 + 4  # header + 2 steps x 2 layers
    assert rows[1][:2] == ["1", "0"]
    assert float(rows[1][2]) == 0.5
    assert rows[2][1] == "1"
    # prune step carries kept_count per layer
    assert rows[3][7] == "2" and rows[4][7] == "2"
    # repr round-trip keeps float exactness
    assert float(rows[4][2]) == 0.2


def test_merge_traces_orders_by_step_then_name():
    rec_a, rec_b = TraceRecorder(), TraceRecorder()
    rec_a.record_step(snap(1, [0.5]))
    rec_a.record_step(snap(3, [0.4]))
    rec_b.record_step(snap(2, [0.3]))
    rec_b.record_step(snap(3, [0.2]))
    merged = merge_traces([("b", rec_b.events), ("a", rec_a.events)])
    assert [(name, ev.step) for name, ev in merged] == [
        ("a", 1), ("b", 2), ("a", 3), ("b", 3),
    ]
