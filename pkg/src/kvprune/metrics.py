"""Hallucination scoring and efficiency accounting.

CHAIR scoring: captions are matched against a ground-truth object list via a
synonym map (surface form -> canonical label), word-boundary and
case-insensitive. Mentions are deduplicated per image before the ratios:

  instance rate  = hallucinated mentions / all mentions   (corpus totals)
  sentence rate  = captions with >= 1 hallucination / all captions

Captions that mention no object at all are excluded from the instance-rate
denominator (they have nothing to get wrong) but still count as clean
captions in the sentence rate.

FLOPs accounting covers the width-dependent attention terms and the MLP:
score FLOPs per layer = 2 * num_heads * head_dim * width (one multiply-add
per cached key element), value-weighting identical, MLP = 16 * d^2 per layer
(d -> 4d -> d at 2 FLOPs per multiply-add). Q/K/V/output projections are
width-independent constants and are left out of the comparison.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FormatError
from .model import DecoderConfig

__all__ = [
    "AnnotationSet",
    "load_annotations",
    "load_captions",
    "chair_score",
    "FlopsEntry",
    "FlopsLedger",
    "flops_for_step",
    "measure_latency",
]


# -- CHAIR ---------------------------------------------------------------------


@dataclass
class AnnotationSet:
    """Ground-truth objects per image plus the surface-form synonym map."""

    objects: dict[str, set[str]]  # image id -> canonical labels
    synonyms: dict[str, str]  # surface form -> canonical label

    def __post_init__(self):
        for image_id, labels in self.objects.items():
            for label in labels:
                if label != label.lower():
                    raise ContractViolation(
                        f"annotations: object {label!r} of image {image_id!r} is not lowercase"
                    )
        for surface, canonical in self.synonyms.items():
            if canonical != canonical.lower():
                raise ContractViolation(f"annotations: canonical {canonical!r} is not lowercase")

    def vocabulary(self) -> dict[str, str]:
        """Every matchable surface form; canonical labels match themselves."""
        vocab = dict(self.synonyms)
        canonicals = set(self.synonyms.values())
        for labels in self.objects.values():
            canonicals.update(labels)
        for canonical in canonicals:
            vocab.setdefault(canonical, canonical)
        return vocab


def load_annotations(path) -> AnnotationSet:
    with open(path, "r", encoding="utf-8") as fp:
        try:
            raw = json.load(fp)
        except json.JSONDecodeError as exc:
            raise FormatError(f"annotation file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or "images" not in raw:
        raise FormatError("annotation file must be an object with an 'images' list")
    objects = {}
    for entry in raw["images"]:
        objects[str(entry["id"])] = {str(o) for o in entry["objects"]}
    synonyms = {str(k): str(v) for k, v in raw.get("synonyms", {}).items()}
    return AnnotationSet(objects=objects, synonyms=synonyms)


def load_captions(path) -> list[tuple[str, str]]:
    """JSONL of {id, text}; order preserved."""
    captions = []
    with open(path, "r", encoding="utf-8") as fp:
        for lineno, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                captions.append((str(raw["id"]), str(raw["text"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise FormatError(f"caption line {lineno} is malformed: {exc}") from exc
    return captions


def _extract_mentions(text: str, vocab: dict[str, str]) -> set[str]:
    mentioned = set()
    for surface, canonical in vocab.items():
        if re.search(rf"\b{re.escape(surface)}\b", text, flags=re.IGNORECASE):
            mentioned.add(canonical)
    return mentioned


def chair_score(captions: list[tuple[str, str]], annotations: AnnotationSet) -> dict:
    """Corpus hallucination rates plus per-image mention detail."""
    vocab = annotations.vocabulary()
    total_mentions = 0
    total_hallucinated = 0
    flagged_captions = 0
    per_image = []
    for image_id, text in captions:
        if image_id not in annotations.objects:
            raise ContractViolation(f"chair_score: caption {image_id!r} has no annotation entry")
        truth = annotations.objects[image_id]
        mentioned = _extract_mentions(text, vocab)
        hallucinated = {m for m in mentioned if m not in truth}
        total_mentions += len(mentioned)
        total_hallucinated += len(hallucinated)
        if hallucinated:
            flagged_captions += 1
        per_image.append(
            {
                "id": image_id,
                "mentioned": sorted(mentioned),
                "hallucinated": sorted(hallucinated),
            }
        )
    if not captions:
        raise ContractViolation("chair_score: empty caption list")
    chair_i = total_hallucinated / total_mentions if total_mentions else 0.0
    chair_s = flagged_captions / len(captions)
    return {
        "chair_s": chair_s,
        "chair_i": chair_i,
        "num_captions": len(captions),
        "num_mentions": total_mentions,
        "num_hallucinated": total_hallucinated,
        "per_image": per_image,
    }


# -- FLOPs ------------------------------------------------------------------------


@dataclass
class FlopsEntry:
    step: int
    widths: list[int]
    score_flops: int
    value_flops: int
    mlp_flops: int

    @property
    def total(self) -> int:
        return self.score_flops + self.value_flops + self.mlp_flops

    @property
    def attention_flops(self) -> int:
        return self.score_flops + self.value_flops


def flops_for_step(config: DecoderConfig, cache_widths: list[int], step: int = 0) -> FlopsEntry:
    """Exact integer cost of one forward step at the given per-layer widths."""
    if len(cache_widths) != config.num_layers:
        raise ContractViolation(
            f"flops_for_step: {len(cache_widths)} widths for {config.num_layers} layers"
        )
    if any(w < 1 for w in cache_widths):
        raise ContractViolation("flops_for_step: widths must be >= 1")
    per_layer_coeff = 2 * config.num_heads * config.head_dim
    score = sum(per_layer_coeff * w for w in cache_widths)
    d = config.hidden_dim
    mlp = 16 * d * d * config.num_layers
    return FlopsEntry(step=step, widths=list(cache_widths), score_flops=score,
                      value_flops=score, mlp_flops=mlp)


@dataclass
class FlopsLedger:
    config: DecoderConfig
    entries: list[FlopsEntry] = field(default_factory=list)

    def record(self, step: int, cache_widths: list[int]) -> FlopsEntry:
        entry = flops_for_step(self.config, cache_widths, step=step)
        self.entries.append(entry)
        return entry

    def record_prefill(self, prompt_len: int) -> FlopsEntry:
        """One aggregate entry for all prompt passes (widths 1..prompt_len).

        Equals the sum of flops_for_step over each prefill width; kept as a
        single step-1 entry because the trace also treats prefill as step 1.
        """
        if prompt_len < 1:
            raise ContractViolation("record_prefill: prompt must be non-empty")
        cfg = self.config
        coeff = 2 * cfg.num_heads * cfg.head_dim
        score = cfg.num_layers * coeff * (prompt_len * (prompt_len + 1) // 2)
        mlp = 16 * cfg.hidden_dim * cfg.hidden_dim * cfg.num_layers * prompt_len
        entry = FlopsEntry(
            step=1, widths=[prompt_len] * cfg.num_layers,
            score_flops=score, value_flops=score, mlp_flops=mlp,
        )
        self.entries.append(entry)
        return entry

    def clone(self) -> "FlopsLedger":
        return FlopsLedger(config=self.config, entries=list(self.entries))

    @property
    def attention_total(self) -> int:
        return sum(e.attention_flops for e in self.entries)

    @property
    def total(self) -> int:
        return sum(e.total for e in self.entries)

    def summary(self) -> dict:
        return {
            "steps": len(self.entries),
            "attention_flops": self.attention_total,
            "mlp_flops": sum(e.mlp_flops for e in self.entries),
            "total_flops": self.total,
        }


# -- latency -----------------------------------------------------------------------


def measure_latency(per_token_seconds: list[float], warmup: int = 5) -> dict:
    """Mean/median/p95 of steady-state per-token forward latency.

    The first `warmup` tokens are discarded; the run must still contain at
    least 50 measured tokens afterwards to count as steady state.
    """
    if len(per_token_seconds) <= warmup:
        raise ContractViolation(
            f"measure_latency: run of {len(per_token_seconds)} tokens is within warmup {warmup}"
        )
    steady = np.asarray(per_token_seconds[warmup:], dtype=np.float64)
    if steady.size < 50:
        raise ContractViolation(
            f"measure_latency: need >= 50 steady-state tokens, got {steady.size}"
        )
    return {
        "count": int(steady.size),
        "mean": float(np.mean(steady)),
        "median": float(np.median(steady)),
        "p95": float(np.percentile(steady, 95)),
    }
