"""Decoder-only transformer that runs one token per forward pass off a KV cache.

Pre-norm blocks with RMS normalization, rotary position encoding, multi-head
attention over the cached keys, and a ReLU MLP. Besides logits, every forward
step reports the last token's head-averaged attention row split by token role
(prompt text / visual / generated); that row is the only signal pruning
policies ever see.

Weights are synthetic: drawn from a seeded generator, never trained. Scale
rule: matrix entries are N(0, 1/fan_in) so attention logits and output logits
land near unit variance, which keeps softmaxes finite and non-degenerate.
Embedding rows are drawn around a shared center direction (unit noise plus
a 2x-scaled common component). Trained embedding tables are anisotropic in
exactly this way, and the shared component is what gives some tokens
persistently high attention across decoding steps; fully isotropic rows
would reshuffle the attention ranking every step and no selection policy
could beat any other on such a model.

Weight file format ("PKVW"): little-endian throughout.
  magic       4 bytes  b"PKVW"
  version     u32      currently 1
  config      u32 x6   num_layers, num_heads, head_dim, hidden_dim,
                       vocab_size, max_seq_len
  rope_base   f32
  matrices    f32 row-major, in order: embedding (vocab x d); per layer:
              attn_gain (d), wq, wk, wv, wo (d x d each), mlp_gain (d),
              w_in (d x 4d), w_out (4d x d); unembedding (d x vocab).
Round-trips are bit-exact because arrays are stored as float32 and written
verbatim.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, FormatError
from .kvcache import Role, SegmentedKVCache
from .numerics import make_rng, matmul, rope_apply, softmax_row

__all__ = [
    "DecoderConfig",
    "DecoderWeights",
    "AttentionSnapshot",
    "init_weights",
    "forward_step",
    "prefill",
    "save_weights",
    "load_weights",
]

_MAGIC = b"PKVW"
_VERSION = 1
_MLP_MULT = 4  # hidden width d -> 4d -> d
_EMBED_CENTER_SCALE = 2.0  # strength of the shared embedding direction


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int
    num_heads: int
    head_dim: int
    hidden_dim: int
    vocab_size: int
    max_seq_len: int
    rope_base: float = 10000.0

    def validate(self) -> "DecoderConfig":
        for name in ("num_layers", "num_heads", "head_dim", "hidden_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"config: {name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"config: hidden_dim {self.hidden_dim} != num_heads x head_dim "
                f"{self.num_heads}x{self.head_dim}"
            )
        if not np.isfinite(self.rope_base) or self.rope_base <= 0:
            raise ConfigError(f"config: rope_base must be positive and finite, got {self.rope_base}")
        return self


@dataclass
class DecoderWeights:
    config: DecoderConfig
    embedding: np.ndarray  # (vocab, d)
    attn_gain: list[np.ndarray]
    wq: list[np.ndarray]
    wk: list[np.ndarray]
    wv: list[np.ndarray]
    wo: list[np.ndarray]
    mlp_gain: list[np.ndarray]
    w_in: list[np.ndarray]
    w_out: list[np.ndarray]
    unembed: np.ndarray  # (d, vocab)

    def matrices(self) -> list[np.ndarray]:
        """All arrays in the serialization order documented above."""
        out = [self.embedding]
        for i in range(self.config.num_layers):
            out += [
                self.attn_gain[i], self.wq[i], self.wk[i], self.wv[i], self.wo[i],
                self.mlp_gain[i], self.w_in[i], self.w_out[i],
            ]
        out.append(self.unembed)
        return out


@dataclass
class AttentionSnapshot:
    """Last-token attention at one step, head-averaged and split by role.

    Rows are float64 in cache order within each segment; `avg_visual` is the
    arithmetic mean of the visual row, or None when no visual tokens survive
    (an empty segment has no defined average).
    """

    step: int
    text: list[np.ndarray]
    visual: list[np.ndarray]
    generated: list[np.ndarray]
    avg_visual: list[float | None]
    per_head: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def num_layers(self) -> int:
        return len(self.avg_visual)


def init_weights(config: DecoderConfig, seed: int) -> DecoderWeights:
    """Seeded synthetic weights; same (config, seed) gives identical bits."""
    config.validate()
    rng = make_rng(seed)
    d = config.hidden_dim
    hidden = _MLP_MULT * d

    def draw(rows: int, cols: int) -> np.ndarray:
        scale = 1.0 / np.sqrt(rows)  # fan_in = rows for x @ W
        return (rng.standard_normal((rows, cols)) * scale).astype(np.float32)

    center = _EMBED_CENTER_SCALE * rng.standard_normal(d)
    embedding = (center + rng.standard_normal((config.vocab_size, d))).astype(np.float32)
    attn_gain, wq, wk, wv, wo = [], [], [], [], []
    mlp_gain, w_in, w_out = [], [], []
    for _ in range(config.num_layers):
        wq.append(draw(d, d))
        wk.append(draw(d, d))
        wv.append(draw(d, d))
        wo.append(draw(d, d))
        w_in.append(draw(d, hidden))
        w_out.append(draw(hidden, d))
        attn_gain.append(np.ones(d, dtype=np.float32))
        mlp_gain.append(np.ones(d, dtype=np.float32))
    unembed = draw(d, config.vocab_size)
    return DecoderWeights(
        config=config, embedding=embedding, attn_gain=attn_gain, wq=wq, wk=wk,
        wv=wv, wo=wo, mlp_gain=mlp_gain, w_in=w_in, w_out=w_out, unembed=unembed,
    )


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    scale = 1.0 / np.sqrt(np.mean(x64 * x64) + 1e-6)
    return (x64 * scale * gain.astype(np.float64)).astype(x.dtype)


def forward_step(
    weights: DecoderWeights,
    config: DecoderConfig,
    cache: SegmentedKVCache,
    token: int,
    position: int,
    step: int,
    role: Role = Role.GENERATED,
    intervention=None,
    capture_heads: bool = False,
) -> tuple[np.ndarray, AttentionSnapshot]:
    """One forward pass for `token`; appends its K/V and attends to the cache.

    `intervention`, when given, must expose apply(prob_row, visual_mask) and
    is applied per head, post-softmax, before head averaging and before value
    mixing, so it changes both the recorded snapshot and the generation.
    """
    if cache.num_layers != config.num_layers:
        raise ContractViolation(
            f"forward_step: cache has {cache.num_layers} layers, config {config.num_layers}"
        )
    if position >= config.max_seq_len:
        raise ContractViolation(
            f"forward_step: position {position} >= max_seq_len {config.max_seq_len}"
        )
    if not 0 <= token < config.vocab_size:
        raise ContractViolation(f"forward_step: token {token} outside vocab {config.vocab_size}")

    num_heads, d_k = config.num_heads, config.head_dim
    x = weights.embedding[token].copy()  # (d,) float32 residual stream

    text_rows, visual_rows, gen_rows, avg_visual = [], [], [], []
    head_dump: list[np.ndarray] = []
    for layer in range(config.num_layers):
        h = _rms_norm(x, weights.attn_gain[layer])
        q = matmul(h[None, :], weights.wq[layer])[0]
        k = matmul(h[None, :], weights.wk[layer])[0]
        v = matmul(h[None, :], weights.wv[layer])[0]
        q = rope_apply(q, position, d_k, config.rope_base)
        k = rope_apply(k, position, d_k, config.rope_base)
        cache.append(layer, k, v, role, position)

        keys = cache.keys(layer).astype(np.float64)      # (n, d)
        values = cache.values(layer).astype(np.float64)
        n = keys.shape[0]
        vis_mask = cache.role_mask(layer, Role.VISUAL)
        q64 = q.astype(np.float64).reshape(num_heads, d_k)

        # Heads reduce in fixed ascending order for deterministic averages.
        head_avg = np.zeros(n, dtype=np.float64)
        mixed = np.empty(config.hidden_dim, dtype=np.float64)
        per_head_rows = np.empty((num_heads, n), dtype=np.float64) if capture_heads else None
        for head in range(num_heads):
            cols = slice(head * d_k, (head + 1) * d_k)
            scores = keys[:, cols] @ q64[head] / np.sqrt(d_k)
            probs = softmax_row(scores)
            if intervention is not None:
                probs = intervention.apply(probs, vis_mask)
            if per_head_rows is not None:
                per_head_rows[head] = probs
            head_avg += probs
            mixed[cols] = probs @ values[:, cols]
        head_avg /= num_heads
        if per_head_rows is not None:
            head_dump.append(per_head_rows)

        attn_out = matmul(mixed.astype(np.float32)[None, :], weights.wo[layer])[0]
        x = x + attn_out

        h2 = _rms_norm(x, weights.mlp_gain[layer])
        up = matmul(h2[None, :], weights.w_in[layer])[0]
        np.maximum(up, 0.0, out=up)
        x = x + matmul(up[None, :], weights.w_out[layer])[0]

        text_rows.append(head_avg[cache.role_mask(layer, Role.PROMPT_TEXT)])
        vis_row = head_avg[vis_mask]
        visual_rows.append(vis_row)
        gen_rows.append(head_avg[cache.role_mask(layer, Role.GENERATED)])
        avg_visual.append(float(np.mean(vis_row)) if vis_row.size else None)

    logits = matmul(x[None, :], weights.unembed)[0]
    snapshot = AttentionSnapshot(
        step=step,
        text=text_rows,
        visual=visual_rows,
        generated=gen_rows,
        avg_visual=avg_visual,
        per_head=head_dump if capture_heads else None,
    )
    return logits, snapshot


def prefill(
    weights: DecoderWeights,
    config: DecoderConfig,
    cache: SegmentedKVCache,
    tokens: list[int],
    roles: list[Role],
    intervention=None,
) -> tuple[np.ndarray, AttentionSnapshot]:
    """Run the whole prompt through the model, filling an empty cache.

    Returns the last prompt token's logits and snapshot; the snapshot is
    stamped step 1 because it seeds the pruning history and its logits pick
    the first generated token.
    """
    if any(cache.length(layer) for layer in range(cache.num_layers)):
        raise ContractViolation("prefill: cache must be empty")
    if len(tokens) != len(roles):
        raise ContractViolation("prefill: tokens and roles must align")
    if not tokens:
        raise ContractViolation("prefill: prompt must be non-empty")
    if len(tokens) > config.max_seq_len:
        raise ContractViolation(
            f"prefill: prompt of {len(tokens)} exceeds max_seq_len {config.max_seq_len}"
        )
    logits = snapshot = None
    for pos, (tok, role) in enumerate(zip(tokens, roles)):
        logits, snapshot = forward_step(
            weights, config, cache, tok, pos, step=1, role=role, intervention=intervention
        )
    return logits, snapshot


# -- serialization -----------------------------------------------------------


def save_weights(weights: DecoderWeights, path) -> None:
    cfg = weights.config
    header = _MAGIC + struct.pack(
        "<IIIIIIIf",
        _VERSION,
        cfg.num_layers, cfg.num_heads, cfg.head_dim,
        cfg.hidden_dim, cfg.vocab_size, cfg.max_seq_len,
        cfg.rope_base,
    )
    with open(path, "wb") as fp:
        fp.write(header)
        for mat in weights.matrices():
            if mat.dtype != np.float32:
                raise ContractViolation("save_weights: matrices must be float32")
            fp.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def load_weights(path) -> DecoderWeights:
    with open(path, "rb") as fp:
        blob = fp.read()
    if len(blob) < 4 + struct.calcsize("<IIIIIIIf"):
        raise FormatError("weight file truncated before header end")
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    version, n_layers, n_heads, d_k, d, vocab, max_seq, rope_base = struct.unpack_from(
        "<IIIIIIIf", blob, 4
    )
    if version != _VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    try:
        config = DecoderConfig(
            num_layers=n_layers, num_heads=n_heads, head_dim=d_k, hidden_dim=d,
            vocab_size=vocab, max_seq_len=max_seq, rope_base=rope_base,
        ).validate()
    except ConfigError as exc:
        raise FormatError(f"weight file header is inconsistent: {exc}") from exc

    offset = 4 + struct.calcsize("<IIIIIIIf")
    hidden = _MLP_MULT * d

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError("weight file truncated inside matrix data")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset = end
        if not np.all(np.isfinite(arr)):
            raise FormatError("weight file contains non-finite entries")
        return arr.copy()

    embedding = take((vocab, d))
    attn_gain, wq, wk, wv, wo = [], [], [], [], []
    mlp_gain, w_in, w_out = [], [], []
    for _ in range(n_layers):
        attn_gain.append(take((d,)))
        wq.append(take((d, d)))
        wk.append(take((d, d)))
        wv.append(take((d, d)))
        wo.append(take((d, d)))
        mlp_gain.append(take((d,)))
        w_in.append(take((d, hidden)))
        w_out.append(take((hidden, d)))
    unembed = take((d, vocab))
    if offset != len(blob):
        raise FormatError(f"weight file has {len(blob) - offset} trailing bytes")
    return DecoderWeights(
        config=config, embedding=embedding, attn_gain=attn_gain, wq=wq, wk=wk,
        wv=wv, wo=wo, mlp_gain=mlp_gain, w_in=w_in, w_out=w_out, unembed=unembed,
    )
