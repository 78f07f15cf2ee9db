"""Independent full-sequence recompute of the decoder, for oracle checks.

Structurally different from the production path: no KV cache, no per-token
loop; the whole prefix is recomputed each step with batched float64 matrix
ops and a causal mask. Agreement between the two is evidence that the cache
bookkeeping is sound.
"""

import numpy as np


def _rope_rows(mat, positions, head_dim, base):
    out = np.empty_like(mat)
    half = head_dim // 2
    freqs = base ** (np.arange(half) * 2.0 / head_dim)
    for t in range(mat.shape[0]):
        angles = positions[t] / freqs
        cos, sin = np.cos(angles), np.sin(angles)
        x = mat[t].reshape(-1, half, 2)
        o = np.empty_like(x)
        o[..., 0] = x[..., 0] * cos - x[..., 1] * sin
        o[..., 1] = x[..., 0] * sin + x[..., 1] * cos
        out[t] = o.reshape(mat.shape[1])
    return out


def _rms_rows(x, gain):
    scale = 1.0 / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + 1e-6)
    return x * scale * gain


def dense_forward(weights, tokens):
    """Logits of the last token plus per-layer head-averaged last-row attention.

    Returns (logits (vocab,), attn_rows list of (T,) float64 arrays).
    """
    cfg = weights.config
    heads, d_k = cfg.num_heads, cfg.head_dim
    seq = np.asarray(tokens)
    x = weights.embedding[seq].astype(np.float64)
    n = x.shape[0]
    positions = np.arange(n)
    causal = np.tril(np.ones((n, n), dtype=bool))
    attn_rows = []
    for layer in range(cfg.num_layers):
        h = _rms_rows(x, weights.attn_gain[layer].astype(np.float64))
        q = _rope_rows(h @ weights.wq[layer].astype(np.float64), positions, d_k, cfg.rope_base)
        k = _rope_rows(h @ weights.wk[layer].astype(np.float64), positions, d_k, cfg.rope_base)
        v = h @ weights.wv[layer].astype(np.float64)
        attn_out = np.zeros_like(x)
        last_row = np.zeros(n)
        for head in range(heads):
            cols = slice(head * d_k, (head + 1) * d_k)
            scores = q[:, cols] @ k[:, cols].T / np.sqrt(d_k)
            scores = np.where(causal, scores, -np.inf)
            p = np.exp(scores - scores.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            attn_out[:, cols] = p @ v[:, cols]
            last_row += p[-1]
        x = x + attn_out @ weights.wo[layer].astype(np.float64)
        h2 = _rms_rows(x, weights.mlp_gain[layer].astype(np.float64))
        up = np.maximum(h2 @ weights.w_in[layer].astype(np.float64), 0.0)
        x = x + up @ weights.w_out[layer].astype(np.float64)
        attn_rows.append(last_row / heads)
    logits = x[-1] @ weights.unembed.astype(np.float64)
    return logits, attn_rows


def dense_greedy(weights, prompt_tokens, max_new_tokens, stop_tokens=frozenset({0})):
    """Greedy continuation by full recompute; returns (tokens, per-step logits)."""
    seq = list(prompt_tokens)
    generated = []
    all_logits = []
    logits, _ = dense_forward(weights, seq)
    all_logits.append(logits)
    nxt = int(np.argmax(logits))
    generated.append(nxt)
    while nxt not in stop_tokens and len(generated) < max_new_tokens:
        seq.append(nxt)
        logits, _ = dense_forward(weights, seq)
        all_logits.append(logits)
        nxt = int(np.argmax(logits))
        generated.append(nxt)
    return generated, all_logits
