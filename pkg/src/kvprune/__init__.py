"""Toy multimodal decoder runtime with adaptive visual-token KV cache pruning.

The package decodes from a role-tagged prompt (text / visual / generated
tokens) through a small seeded transformer, watching the last token's
head-averaged attention. Pruning policies shrink the visual part of the KV
cache mid-generation; telemetry records every decision so runs can be
replayed and audited without re-running the model.
"""

from .errors import ConfigError, ContractViolation, FormatError
from .kvcache import PruneReceipt, Role, SegmentedKVCache, retained_count
from .model import (
    AttentionSnapshot,
    DecoderConfig,
    DecoderWeights,
    forward_step,
    init_weights,
    load_weights,
    prefill,
    save_weights,
)
from .numerics import make_rng, matmul, rope_apply, sample_top_p, softmax_row
from .policy import (
    AdaptivePolicy,
    AttentionIntervention,
    BottomK,
    FixedTopK,
    NoPrune,
    PruneDecision,
    PruneState,
    RandomKeep,
    adaptive_step,
    apply_intervention,
    bottomk_select,
    layer_vote,
    make_policy,
    topk_select,
)
from .decode import BeamState, DecodeRequest, DecodeResult, build_synthetic_prompt, decode
from .telemetry import (
    AttentionHistory,
    TraceEvent,
    TraceRecorder,
    export_csv,
    load_trace,
    refresh_history,
)
from .metrics import (
    AnnotationSet,
    FlopsLedger,
    chair_score,
    flops_for_step,
    load_annotations,
    load_captions,
    measure_latency,
)
from .replay import replay_trace
from .config import PRESETS, RunConfig, load_run_config

__version__ = "0.1.0"
