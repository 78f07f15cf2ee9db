"""Command-line front end.

Subcommands:
  genmodel    write a seeded synthetic weight file (PKVW format)
  run         decode under a run config; writes tokens/trace/CSV/FLOPs files
  replay      recheck a trace's pruning decisions without running the model
  eval-chair  score captions against annotations for object hallucination
  bench       latency + FLOPs comparison of a config against the no-prune
              baseline, interleaved repetitions

Exit codes: 0 success, 2 config validation failure, 3 runtime contract
violation, 4 I/O or file-format failure. Divergences found by `replay` are
report content, not errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import load_run_config
from .decode import decode
from .errors import ConfigError, ContractViolation, FormatError
from .metrics import chair_score, load_annotations, load_captions, measure_latency
from .model import DecoderConfig, init_weights, load_weights, save_weights
from .replay import replay_trace
from .telemetry import export_csv, load_trace

__all__ = ["main"]


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_json(path: str, payload: dict) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(payload, fp, indent=2, sort_keys=True)
        fp.write("\n")


def _run_once(rc, trace_sink=None):
    weights, dconfig = rc.load_model()
    request = rc.build_request()
    policy = rc.build_policy()
    intervention = rc.build_intervention()
    meta = {
        "policy": rc.policy,
        "r": rc.r,
        "t": rc.t,
        "k": rc.k,
        "history_refresh": rc.history_refresh,
        "model_seed": rc.model_seed,
        "prompt": [rc.text_tokens, rc.visual_tokens, rc.prompt_seed],
    }
    result = decode(
        request, weights, dconfig, policy=policy, intervention=intervention,
        trace_sink=trace_sink, trace_meta=meta,
    )
    return result, request


# -- subcommands ------------------------------------------------------------------


def cmd_genmodel(args) -> int:
    config = DecoderConfig(
        num_layers=args.num_layers, num_heads=args.num_heads, head_dim=args.head_dim,
        hidden_dim=args.hidden_dim, vocab_size=args.vocab_size,
        max_seq_len=args.max_seq_len, rope_base=args.rope_base,
    ).validate()
    weights = init_weights(config, args.seed)
    _ensure_parent(args.out)
    save_weights(weights, args.out)
    print(json.dumps({"written": args.out, "seed": args.seed}))
    return 0


def cmd_run(args) -> int:
    rc = load_run_config(args.config, args.set)
    sink = None
    if rc.out_trace:
        _ensure_parent(rc.out_trace)
        sink = open(rc.out_trace, "w", encoding="utf-8")
    try:
        result, request = _run_once(rc, trace_sink=sink)
    finally:
        if sink is not None:
            sink.close()
    if rc.out_tokens:
        _write_json(rc.out_tokens, {
            "prompt_len": len(request.tokens),
            "generated": result.tokens,
        })
    if rc.out_csv:
        _ensure_parent(rc.out_csv)
        with open(rc.out_csv, "w", encoding="utf-8", newline="") as fp:
            export_csv(result.events, fp)
    if rc.out_flops:
        summary = result.ledger.summary()
        summary["policy"] = rc.policy
        _write_json(rc.out_flops, summary)
    print(json.dumps({
        "generated_count": len(result.tokens),
        "tokens": result.tokens,
        "trigger_steps": [e.step for e in result.events if e.prune_triggered],
        "attention_flops": result.ledger.attention_total,
    }))
    return 0


def cmd_replay(args) -> int:
    header, events = load_trace(args.trace)
    if args.config is not None or args.set:
        rc = load_run_config(args.config, args.set)
        if rc.policy != "adaptive":
            raise ConfigError("replay checks adaptive-policy traces; set policy.policy=adaptive")
        r, t, mode = rc.r, rc.t, rc.history_refresh
    else:
        if header.get("policy") != "adaptive":
            raise ConfigError(
                "trace header is not from an adaptive run; pass --config for parameters"
            )
        r, t, mode = float(header["r"]), int(header["t"]), str(header["history_refresh"])
    report = replay_trace(events, r, t, history_mode=mode)
    print(json.dumps(report))
    return 0


def cmd_eval_chair(args) -> int:
    annotations = load_annotations(args.annotations)
    captions = load_captions(args.captions)
    report = chair_score(captions, annotations)
    if args.out:
        _write_json(args.out, report)
    print(json.dumps({k: report[k] for k in
                      ("chair_s", "chair_i", "num_captions", "num_mentions", "num_hallucinated")}))
    return 0


def cmd_bench(args) -> int:
    if args.repetitions < 3:
        raise ConfigError(f"bench needs repetitions >= 3, got {args.repetitions}")
    rc = load_run_config(args.config, args.set)
    baseline = load_run_config(args.config, list(args.set) + ["policy.policy=none"])

    def decode_walls(result):
        return [e.wall_time for e in result.events if e.step >= 2]

    policy_walls: list[float] = []
    base_walls: list[float] = []
    policy_flops = base_flops = None
    # interleave A/B so drift hits both runs equally
    for _ in range(args.repetitions):
        result, _ = _run_once(rc)
        policy_walls.extend(decode_walls(result))
        policy_flops = result.ledger.attention_total
        result, _ = _run_once(baseline)
        base_walls.extend(decode_walls(result))
        base_flops = result.ledger.attention_total

    report = {
        "repetitions": args.repetitions,
        "policy": {
            "name": rc.policy,
            "latency": measure_latency(policy_walls),
            "attention_flops": policy_flops,
        },
        "baseline": {
            "name": "none",
            "latency": measure_latency(base_walls),
            "attention_flops": base_flops,
        },
    }
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report))
    return 0


# -- argument plumbing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvprune",
        description="Toy multimodal decoder with visual-token KV cache pruning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("genmodel", help="write a seeded synthetic weight file")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--num-layers", type=int, default=4)
    gen.add_argument("--num-heads", type=int, default=4)
    gen.add_argument("--head-dim", type=int, default=16)
    gen.add_argument("--hidden-dim", type=int, default=64)
    gen.add_argument("--vocab-size", type=int, default=256)
    gen.add_argument("--max-seq-len", type=int, default=512)
    gen.add_argument("--rope-base", type=float, default=10000.0)
    gen.set_defaults(func=cmd_genmodel)

    run = sub.add_parser("run", help="decode under a run config")
    run.add_argument("--config", default=None, help="TOML run file")
    run.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("replay", help="recheck a trace's pruning decisions")
    rep.add_argument("--trace", required=True)
    rep.add_argument("--config", default=None)
    rep.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    rep.set_defaults(func=cmd_replay)

    chair = sub.add_parser("eval-chair", help="score captions for object hallucination")
    chair.add_argument("--captions", required=True, help="JSONL of {id, text}")
    chair.add_argument("--annotations", required=True, help="JSON annotation file")
    chair.add_argument("--out", default=None)
    chair.set_defaults(func=cmd_eval_chair)

    bench = sub.add_parser("bench", help="latency and FLOPs against the no-prune baseline")
    bench.add_argument("--config", default=None)
    bench.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    bench.add_argument("--repetitions", type=int, default=5)
    bench.add_argument("--out", default=None)
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
