"""Segmented per-layer KV store with role tags and visual-token pruning.

Each cached token carries a role (prompt text / visual / generated) and
its original sequence position. Pruning removes visual rows only, by
physical compaction, so attention width genuinely shrinks; text and
generated rows are never touched. Keys are stored already position-encoded,
so survivors keep their original rotation and no re-indexing happens.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation

__all__ = ["Role", "SegmentedKVCache", "PruneReceipt", "LayerPrune", "retained_count"]


class Role(enum.Enum):
    PROMPT_TEXT = "prompt_text"
    VISUAL = "visual"
    GENERATED = "generated"


_ROLE_CODE = {Role.PROMPT_TEXT: 0, Role.VISUAL: 1, Role.GENERATED: 2}
_CODE_ROLE = {v: k for k, v in _ROLE_CODE.items()}


def retained_count(n: int, r: float) -> int:
    """Tokens kept by one prune at keep-ratio ``r``: ``max(1, floor(r * n))``.

    The floor is the conservative reading of a fractional keep count; the
    1-token safety floor keeps the visual segment non-empty so its average
    attention stays defined.
    """
    if n < 1:
        raise ContractViolation(f"retained_count: n must be >= 1, got {n}")
    if not 0.0 < r < 1.0:
        raise ContractViolation(f"retained_count: r must be in (0, 1), got {r}")
    return max(1, int(np.floor(r * n)))


@dataclass
class LayerPrune:
    """One layer's share of a prune: indices are into the pre-prune visual segment."""

    kept: list[int]
    removed: list[int]
    kept_original: list[int]  # ordinals into the prefill visual ordering


@dataclass
class PruneReceipt:
    """Audit record of one prune operation, for traces and replay."""

    step: int
    layers: list[LayerPrune] = field(default_factory=list)

    @property
    def removed_counts(self) -> list[int]:
        return [len(lp.removed) for lp in self.layers]

    @property
    def kept_counts(self) -> list[int]:
        return [len(lp.kept) for lp in self.layers]


class SegmentedKVCache:
    """Per-layer K/V rows plus role and position bookkeeping.

    Single-writer: one decoding stream owns an instance; beam search clones
    via :meth:`clone` so forks never share mutable state.
    """

    def __init__(self, num_layers: int, width: int, capacity: int = 64):
        if num_layers < 1 or width < 1:
            raise ContractViolation("cache needs num_layers >= 1 and width >= 1")
        self.num_layers = num_layers
        self.width = width
        cap = max(capacity, 8)
        self._keys = [np.zeros((cap, width), dtype=np.float32) for _ in range(num_layers)]
        self._values = [np.zeros((cap, width), dtype=np.float32) for _ in range(num_layers)]
        self._roles = [np.zeros(cap, dtype=np.int8) for _ in range(num_layers)]
        self._positions = [np.zeros(cap, dtype=np.int64) for _ in range(num_layers)]
        self._len = [0] * num_layers
        # Ordinals (into the prefill visual ordering) still present per layer.
        self.retained_visual: list[list[int]] = [[] for _ in range(num_layers)]
        self._visual_appended = [0] * num_layers

    # -- capacity -----------------------------------------------------------

    def _ensure_capacity(self, layer: int, need: int) -> None:
        cap = self._keys[layer].shape[0]
        if need <= cap:
            return
        new_cap = cap
        while new_cap < need:
            new_cap *= 2
        for store in (self._keys, self._values):
            grown = np.zeros((new_cap, self.width), dtype=np.float32)
            grown[:cap] = store[layer][:cap]
            store[layer] = grown
        for store, dtype in ((self._roles, np.int8), (self._positions, np.int64)):
            grown = np.zeros(new_cap, dtype=dtype)
            grown[:cap] = store[layer][:cap]
            store[layer] = grown

    # -- append / views -----------------------------------------------------

    def append(self, layer: int, key_row, value_row, role: Role, original_position: int) -> None:
        key_row = np.asarray(key_row, dtype=np.float32)
        value_row = np.asarray(value_row, dtype=np.float32)
        if key_row.shape != (self.width,) or value_row.shape != (self.width,):
            raise ContractViolation(
                f"append: row width must be {self.width}, got {key_row.shape} / {value_row.shape}"
            )
        n = self._len[layer]
        self._ensure_capacity(layer, n + 1)
        self._keys[layer][n] = key_row
        self._values[layer][n] = value_row
        self._roles[layer][n] = _ROLE_CODE[role]
        self._positions[layer][n] = original_position
        self._len[layer] = n + 1
        if role is Role.VISUAL:
            self.retained_visual[layer].append(self._visual_appended[layer])
            self._visual_appended[layer] += 1

    def length(self, layer: int) -> int:
        return self._len[layer]

    @property
    def lengths(self) -> list[int]:
        return list(self._len)

    def keys(self, layer: int) -> np.ndarray:
        return self._keys[layer][: self._len[layer]]

    def values(self, layer: int) -> np.ndarray:
        return self._values[layer][: self._len[layer]]

    def roles(self, layer: int) -> np.ndarray:
        return self._roles[layer][: self._len[layer]]

    def positions(self, layer: int) -> np.ndarray:
        return self._positions[layer][: self._len[layer]]

    def segment_indices(self, layer: int, role: Role) -> np.ndarray:
        """Row indices of a role's tokens, in cache order."""
        return np.nonzero(self.roles(layer) == _ROLE_CODE[role])[0]

    def role_mask(self, layer: int, role: Role) -> np.ndarray:
        """Boolean mask over current rows selecting one role."""
        return self.roles(layer) == _ROLE_CODE[role]

    def role_counts(self, layer: int) -> dict[Role, int]:
        codes = self.roles(layer)
        return {role: int(np.sum(codes == code)) for role, code in _ROLE_CODE.items()}

    def visual_count(self, layer: int) -> int:
        return int(np.sum(self.roles(layer) == _ROLE_CODE[Role.VISUAL]))

    @property
    def n_v_initial(self) -> int:
        """Visual tokens present at prefill (total ever appended, layer 0)."""
        return self._visual_appended[0]

    # -- pruning -------------------------------------------------------------

    def prune_visual(self, layer: int, keep_indices) -> LayerPrune:
        """Drop visual rows of one layer outside ``keep_indices``.

        ``keep_indices`` are strictly increasing positions into the layer's
        *current* visual segment. Other roles, relative order, and original
        positions are untouched.
        """
        keep = [int(i) for i in keep_indices]
        seg = self.segment_indices(layer, Role.VISUAL)
        n_vis = seg.size
        if len(keep) != len(set(keep)):
            raise ContractViolation("prune_visual: duplicate keep index")
        if any(b <= a for a, b in zip(keep, keep[1:])):
            raise ContractViolation("prune_visual: keep indices must be strictly increasing")
        if keep and (keep[0] < 0 or keep[-1] >= n_vis):
            raise ContractViolation(
                f"prune_visual: keep index out of range for visual segment of {n_vis}"
            )

        keep_set = set(keep)
        removed = [i for i in range(n_vis) if i not in keep_set]
        drop_rows = seg[removed] if removed else np.empty(0, dtype=np.int64)

        n = self._len[layer]
        mask = np.ones(n, dtype=bool)
        mask[drop_rows] = False
        survivors = np.nonzero(mask)[0]
        new_n = survivors.size
        self._keys[layer][:new_n] = self._keys[layer][survivors]
        self._values[layer][:new_n] = self._values[layer][survivors]
        self._roles[layer][:new_n] = self._roles[layer][survivors]
        self._positions[layer][:new_n] = self._positions[layer][survivors]
        self._len[layer] = new_n

        old_retained = self.retained_visual[layer]
        self.retained_visual[layer] = [old_retained[i] for i in keep]
        return LayerPrune(kept=keep, removed=removed, kept_original=list(self.retained_visual[layer]))

    def prune_all(self, keep_per_layer: list[list[int]], step: int) -> PruneReceipt:
        """Apply one prune decision to every layer, returning its receipt."""
        if len(keep_per_layer) != self.num_layers:
            raise ContractViolation(
                f"prune_all: expected {self.num_layers} keep lists, got {len(keep_per_layer)}"
            )
        receipt = PruneReceipt(step=step)
        for layer, keep in enumerate(keep_per_layer):
            receipt.layers.append(self.prune_visual(layer, keep))
        return receipt

    # -- copy / inspection ----------------------------------------------------

    def clone(self) -> "SegmentedKVCache":
        dup = SegmentedKVCache.__new__(SegmentedKVCache)
        dup.num_layers = self.num_layers
        dup.width = self.width
        dup._keys = [a.copy() for a in self._keys]
        dup._values = [a.copy() for a in self._values]
        dup._roles = [a.copy() for a in self._roles]
        dup._positions = [a.copy() for a in self._positions]
        dup._len = list(self._len)
        dup.retained_visual = [list(x) for x in self.retained_visual]
        dup._visual_appended = list(self._visual_appended)
        return dup

    def fingerprint(self, layer: int | None = None) -> bytes:
        """Bytes of the logical contents, for exact-equality assertions."""
        layers = range(self.num_layers) if layer is None else [layer]
        parts = []
        for i in layers:
            parts += [
                self.keys(i).tobytes(),
                self.values(i).tobytes(),
                self.roles(i).tobytes(),
                self.positions(i).tobytes(),
            ]
        return b"".join(parts)

    def dump_jsonl(self, fp) -> None:
        """Debug dump: one JSON line per layer with role runs and positions."""
        for layer in range(self.num_layers):
            codes = self.roles(layer)
            runs: list[list] = []
            for code in codes:
                name = _CODE_ROLE[int(code)].value
                if runs and runs[-1][0] == name:
                    runs[-1][1] += 1
                else:
                    runs.append([name, 1])
            record = {
                "layer": layer,
                "length": self.length(layer),
                "role_runs": runs,
                "positions": self.positions(layer).tolist(),
                "retained_visual": list(self.retained_visual[layer]),
            }
            fp.write(json.dumps(record) + "\n")
