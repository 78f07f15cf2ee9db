"""Run configuration: TOML file, named presets, and command-line overrides.

A run file has [model], [prompt], [decode], [policy] (with optional
[policy.intervention]) and [output] tables; every key has a default so a
minimal file just picks what to change. Overrides arrive as dotted
assignments ("policy.r=0.5") and win over the file. A policy preset fills r
and t only where the file/overrides did not set them explicitly.

All constraint checks happen here, before any weights are touched.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .decode import DecodeRequest, build_synthetic_prompt
from .errors import ConfigError
from .model import DecoderConfig, DecoderWeights, init_weights, load_weights
from .policy import HISTORY_MODES, AttentionIntervention, make_policy

__all__ = ["PRESETS", "RunConfig", "parse_override", "load_run_config"]

# keep ratio / budget pairs shipped as named presets
PRESETS = {
    "llava7b-like": {"r": 0.4, "t": 3},
    "instructblip-like": {"r": 0.7, "t": 2},
    "qwenvl-like": {"r": 0.9, "t": 4},
}

_POLICY_KINDS = ("none", "fixed_topk", "adaptive", "random_keep", "bottom_k")


@dataclass
class RunConfig:
    # model
    weights_path: str | None = None
    model_seed: int = 7
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 16
    hidden_dim: int = 64
    vocab_size: int = 256
    max_seq_len: int = 512
    rope_base: float = 10000.0
    # prompt
    text_tokens: int = 16
    visual_tokens: int = 64
    prompt_seed: int = 11
    # decode
    max_new_tokens: int = 64
    strategy: str = "greedy"
    top_p: float = 1.0
    sample_seed: int = 0
    beam_width: int = 1
    stop_tokens: list[int] = field(default_factory=lambda: [0])
    # policy
    policy: str = "none"
    preset: str | None = None
    r: float = 0.4
    t: int = 3
    k: int = 32
    policy_seed: int = 0
    history_refresh: str = "prev-step"
    shared_indices: bool = False
    intervention_mode: str = "none"
    intervention_factor: float = 1.0
    intervention_renormalize: bool = True
    # output paths (written only when set)
    out_tokens: str | None = None
    out_trace: str | None = None
    out_csv: str | None = None
    out_flops: str | None = None

    # -- validation ----------------------------------------------------------

    def validate(self) -> "RunConfig":
        try:
            self.decoder_config()
        except ConfigError:
            raise
        if self.policy not in _POLICY_KINDS:
            raise ConfigError(f"policy must be one of {_POLICY_KINDS}, got {self.policy!r}")
        if self.strategy not in ("greedy", "nucleus", "beam"):
            raise ConfigError(f"strategy must be greedy|nucleus|beam, got {self.strategy!r}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.text_tokens < 0 or self.visual_tokens < 0:
            raise ConfigError("prompt token counts must be >= 0")
        if self.text_tokens + self.visual_tokens < 1:
            raise ConfigError("prompt must contain at least one token")
        total = self.text_tokens + self.visual_tokens + self.max_new_tokens
        if total > self.max_seq_len:
            raise ConfigError(
                f"prompt + new tokens = {total} exceeds max_seq_len {self.max_seq_len}"
            )
        if self.policy == "adaptive":
            if self.t < 1:
                raise ConfigError(f"adaptive policy needs budget t >= 1, got {self.t}")
            if not 0.0 < self.r < 1.0:
                raise ConfigError(f"keep ratio r must be in (0, 1), got {self.r}")
            if self.visual_tokens < 1:
                raise ConfigError("adaptive policy needs at least one visual token")
        if self.policy in ("fixed_topk", "random_keep", "bottom_k"):
            if not 0 < self.k < self.visual_tokens:
                raise ConfigError(
                    f"one-shot policies need 0 < k < visual_tokens, got k={self.k}, "
                    f"visual_tokens={self.visual_tokens}"
                )
        if self.history_refresh not in HISTORY_MODES:
            raise ConfigError(
                f"history-refresh must be one of {HISTORY_MODES}, got {self.history_refresh!r}"
            )
        if self.intervention_mode not in ("none", "amplify_visual"):
            raise ConfigError(f"intervention mode {self.intervention_mode!r} unknown")
        if self.intervention_factor <= 0:
            raise ConfigError("intervention factor must be > 0")
        return self

    # -- construction helpers ---------------------------------------------------

    def decoder_config(self) -> DecoderConfig:
        try:
            return DecoderConfig(
                num_layers=self.num_layers, num_heads=self.num_heads,
                head_dim=self.head_dim, hidden_dim=self.hidden_dim,
                vocab_size=self.vocab_size, max_seq_len=self.max_seq_len,
                rope_base=self.rope_base,
            ).validate()
        except ConfigError as exc:
            raise ConfigError(f"model block invalid: {exc}") from exc

    def load_model(self) -> tuple[DecoderWeights, DecoderConfig]:
        if self.weights_path is not None:
            weights = load_weights(self.weights_path)
            return weights, weights.config
        config = self.decoder_config()
        return init_weights(config, self.model_seed), config

    def build_request(self) -> DecodeRequest:
        tokens, roles = build_synthetic_prompt(
            self.text_tokens, self.visual_tokens, self.prompt_seed, self.vocab_size
        )
        return DecodeRequest(
            tokens=tokens, roles=roles, max_new_tokens=self.max_new_tokens,
            strategy=self.strategy, top_p=self.top_p, sample_seed=self.sample_seed,
            beam_width=self.beam_width, stop_tokens=frozenset(self.stop_tokens),
        )

    def build_policy(self):
        return make_policy(
            self.policy, r=self.r, t=self.t, k=self.k, seed=self.policy_seed,
            history_mode=self.history_refresh, shared_indices=self.shared_indices,
        )

    def build_intervention(self) -> AttentionIntervention | None:
        if self.intervention_mode == "none":
            return None
        return AttentionIntervention(
            mode=self.intervention_mode, factor=self.intervention_factor,
            renormalize=self.intervention_renormalize,
        )


def parse_override(text: str) -> tuple[list[str], object]:
    """Turn "policy.r=0.5" into (["policy", "r"], 0.5) with scalar coercion."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if len(path) < 2:
        raise ConfigError(f"override key {key!r} must be section.key")
    raw = raw.strip()
    value: object
    if raw.lower() in ("true", "false"):
        value = raw.lower() == "true"
    else:
        try:
            value = int(raw)
        except ValueError:
            try:
                value = float(raw)
            except ValueError:
                value = raw
    return path, value


def _merge_override(tree: dict, path: list[str], value) -> None:
    node = tree
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {'.'.join(path)} crosses a scalar")
    node[path[-1]] = value


def load_run_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    """Read the TOML file (optional), apply overrides, validate."""
    tree: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fp:
                tree = tomllib.load(fp)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file is not valid TOML: {exc}") from exc
    for text in overrides:
        o_path, value = parse_override(text)
        _merge_override(tree, o_path, value)

    model = tree.get("model", {})
    prompt = tree.get("prompt", {})
    decode_blk = tree.get("decode", {})
    policy_blk = dict(tree.get("policy", {}))
    intervention = policy_blk.pop("intervention", {})
    output = tree.get("output", {})

    rc = RunConfig()

    def take(block: dict, key: str, attr: str, cast=None):
        if key in block:
            value = block[key]
            setattr(rc, attr, cast(value) if cast else value)

    take(model, "weights", "weights_path", str)
    take(model, "seed", "model_seed", int)
    take(model, "num_layers", "num_layers", int)
    take(model, "num_heads", "num_heads", int)
    take(model, "head_dim", "head_dim", int)
    take(model, "hidden_dim", "hidden_dim", int)
    take(model, "vocab_size", "vocab_size", int)
    take(model, "max_seq_len", "max_seq_len", int)
    take(model, "rope_base", "rope_base", float)

    take(prompt, "text_tokens", "text_tokens", int)
    take(prompt, "visual_tokens", "visual_tokens", int)
    take(prompt, "seed", "prompt_seed", int)

    take(decode_blk, "max_new_tokens", "max_new_tokens", int)
    take(decode_blk, "strategy", "strategy", str)
    take(decode_blk, "top_p", "top_p", float)
    take(decode_blk, "sample_seed", "sample_seed", int)
    take(decode_blk, "beam_width", "beam_width", int)
    if "stop_tokens" in decode_blk:
        rc.stop_tokens = [int(t) for t in decode_blk["stop_tokens"]]

    take(policy_blk, "policy", "policy", str)
    take(policy_blk, "k", "k", int)
    take(policy_blk, "seed", "policy_seed", int)
    take(policy_blk, "shared-indices", "shared_indices", bool)
    take(policy_blk, "history-refresh", "history_refresh", str)
    preset_name = policy_blk.get("preset")
    if preset_name is not None:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; have {sorted(PRESETS)}")
        rc.preset = preset_name
        preset = PRESETS[preset_name]
        # explicit r/t in the file (or overrides) beat the preset
        rc.r = float(policy_blk.get("r", preset["r"]))
        rc.t = int(policy_blk.get("t", preset["t"]))
    else:
        take(policy_blk, "r", "r", float)
        take(policy_blk, "t", "t", int)

    take(intervention, "mode", "intervention_mode", str)
    take(intervention, "factor", "intervention_factor", float)
    take(intervention, "renormalize", "intervention_renormalize", bool)

    take(output, "tokens", "out_tokens", str)
    take(output, "trace", "out_trace", str)
    take(output, "csv", "out_csv", str)
    take(output, "flops", "out_flops", str)

    return rc.validate()
