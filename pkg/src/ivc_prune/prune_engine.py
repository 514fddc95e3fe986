"""Single-selection pruning: choose visual tokens once at layer i, prune every earlier
layer's KV cache to match, and run the later layers on the survivors only.

Surviving tokens keep their original position ids throughout; nothing is ever
re-indexed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ivc_prune.layout import GridLayout
from ivc_prune.rope_core import ScoreTable, score_table
from ivc_prune.selection import SelectionConfig, SelectionResult, select_tokens
from ivc_prune.toy_model import (
    MLP_EXPANSION,
    KvCache,
    LayerKv,
    Model,
    TokenSequence,
    block_forward,
    readout,
)

__all__ = [
    "PruneConfig",
    "KvCacheStats",
    "PruneRun",
    "EmptyRetentionError",
    "run_with_pruning",
    "prune_kv_cache",
    "cache_stats",
    "stats_from_rows",
    "prefill_layer_macs",
    "Selector",
]

# (v_text, v_img, score table, visual position ids) -> selection
Selector = Callable[[np.ndarray, np.ndarray, ScoreTable, np.ndarray], SelectionResult]


class EmptyRetentionError(ValueError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    selection: SelectionConfig = SelectionConfig()
    bytes_per_element: int = 2

    def __post_init__(self) -> None:
        if self.bytes_per_element < 1:
            raise ValueError(f"bytes_per_element must be positive, got {self.bytes_per_element}")

    @classmethod
    def from_dict(cls, data: dict) -> "PruneConfig":
        data = dict(data)
        bpe = int(data.pop("bytes_per_element", 2))
        return cls(SelectionConfig.from_dict(data), bpe)

    def to_dict(self) -> dict:
        return {**self.selection.to_dict(), "bytes_per_element": self.bytes_per_element}


@dataclass(frozen=True)
class KvCacheStats:
    retained_rows: tuple[int, ...]
    kv_bytes_before: int
    kv_bytes_after: int
    prefill_macs: int
    decode_macs_per_token: int
    avg_tokens_pct: float | None = None

    @property
    def reduction(self) -> float:
        return self.kv_bytes_after / self.kv_bytes_before

    def to_dict(self) -> dict:
        return {
            "avg_tokens_pct": self.avg_tokens_pct,
            "kv_bytes_before": self.kv_bytes_before,
            "kv_bytes_after": self.kv_bytes_after,
            "reduction": self.reduction,
            "prefill_macs": self.prefill_macs,
            "decode_macs_per_token": self.decode_macs_per_token,
            "retained_rows": list(self.retained_rows),
        }


@dataclass
class PruneRun:
    logits: np.ndarray  # one row per retained token
    cache: KvCache
    selection: SelectionResult
    stats: KvCacheStats
    kept_rows: np.ndarray  # sequence rows surviving past layer i
    values: list[np.ndarray] = field(default_factory=list)


def prune_kv_cache(
    cache: KvCache,
    keep: Sequence[int],
    protected_layers: Sequence[int] | frozenset[int],
    visual_positions: Sequence[int],
) -> KvCache:
    """Drop unselected visual rows from every non-protected layer.

    ``keep`` indexes into ``visual_positions`` (the original position ids of the
    visual span). Rows whose position is not visual are text and always stay.
    """
    visual_positions = np.asarray(visual_positions, dtype=np.int64)
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size and (keep.min() < 0 or keep.max() >= len(visual_positions)):
        raise ValueError(f"keep indices outside the visual span of {len(visual_positions)} tokens")
    dropped = np.setdiff1d(visual_positions, visual_positions[keep])
    protected = set(protected_layers)
    layers = []
    for idx, layer in enumerate(cache.layers):
        if idx in protected:
            layers.append(layer)
            continue
        missing = np.setdiff1d(visual_positions[keep], layer.position_ids)
        if missing.size:
            raise ValueError(f"layer {idx} cache has no rows for positions {missing.tolist()}")
        mask = ~np.isin(layer.position_ids, dropped)
        layers.append(LayerKv(layer.keys[:, mask], layer.values[:, mask], layer.position_ids[mask]))
    return KvCache(tuple(layers))


def prefill_layer_macs(rows: int, hidden_dim: int) -> int:
    """Multiply-accumulates of one causal block over ``rows`` contiguous tokens."""
    projections = rows * (4 + 2 * MLP_EXPANSION) * hidden_dim * hidden_dim
    attention = rows * (rows + 1) // 2 * 2 * hidden_dim  # scores plus value mixing
    return projections + attention


def stats_from_rows(
    before_rows: Sequence[int],
    after_rows: Sequence[int],
    n_heads: int,
    head_dim: int,
    selection_layer: int,
    bytes_per_element: int = 2,
    out_dim: int | None = None,
) -> KvCacheStats:
    if len(before_rows) != len(after_rows):
        raise ValueError("before/after caches have different layer counts")
    d = n_heads * head_dim
    out_dim = out_dim or d
    per_row = 2 * n_heads * head_dim * bytes_per_element  # K and V
    before = sum(int(r) * per_row for r in before_rows)
    after = sum(int(r) * per_row for r in after_rows)
    processed = [b if l <= selection_layer else a for l, (b, a) in enumerate(zip(before_rows, after_rows))]
    prefill = sum(prefill_layer_macs(int(r), d) for r in processed) + int(processed[-1]) * d * out_dim
    fixed = len(after_rows) * (4 + 2 * MLP_EXPANSION) * d * d + d * out_dim
    decode = fixed + sum(int(r) * n_heads * head_dim * 2 for r in after_rows)
    return KvCacheStats(tuple(int(r) for r in after_rows), before, after, prefill, decode)


def cache_stats(
    before: KvCache, after: KvCache, cfg: PruneConfig, out_dim: int | None = None
) -> KvCacheStats:
    if before.n_layers != after.n_layers:
        raise ValueError(f"layer count mismatch: {before.n_layers} vs {after.n_layers}")
    geom = {(l.keys.shape[0], l.keys.shape[2]) for l in before.layers + after.layers}
    if len(geom) != 1:
        raise ValueError(f"inconsistent head geometry across caches: {sorted(geom)}")
    (n_heads, head_dim), = geom
    return stats_from_rows(
        before.row_counts(),
        after.row_counts(),
        n_heads,
        head_dim,
        cfg.selection.selection_layer,
        cfg.bytes_per_element,
        out_dim,
    )


def _default_selector(cfg: SelectionConfig, layout: GridLayout | None) -> Selector:
    def select(v_text, v_img, table, visual_pos):
        return select_tokens(v_text, v_img, table, cfg, layout, position_ids=visual_pos)

    return select


def run_with_pruning(
    model: Model,
    seq: TokenSequence,
    cfg: PruneConfig = PruneConfig(),
    layout: GridLayout | None = None,
    selector: Selector | None = None,
) -> PruneRun:
    """Prefill with one selection at ``cfg.selection.selection_layer``.

    ``selector`` replaces the default two-stage selection (used by ablations);
    it receives the selection layer's text and image values.
    """
    n_layers = model.cfg.n_layers
    sel_layer = cfg.selection.selection_layer
    if sel_layer >= n_layers:
        raise ValueError(f"selection layer {sel_layer} must be < n_layers={n_layers}")
    if layout is not None and layout.n_tokens != seq.visual_len:
        raise ValueError(f"layout has {layout.n_tokens} tokens, sequence has {seq.visual_len} visual")

    h, pos = seq.embeddings, seq.position_ids
    caches: list[LayerKv] = []
    values: list[np.ndarray] = []
    for layer in range(sel_layer + 1):
        h, kv, v, _ = block_forward(model, layer, h, pos)
        caches.append(kv)
        values.append(v)

    vis, txt = seq.visual_rows, seq.text_rows
    v_sel = values[sel_layer]
    table = score_table(seq.visual_len, model.cfg.rope, layout)
    select = selector or _default_selector(cfg.selection, layout)
    selection = select(v_sel[txt], v_sel[vis], table, pos[vis])
    if not selection.selected:
        raise EmptyRetentionError("empty retention: selection kept no visual tokens")

    keep = np.asarray(selection.selected, dtype=np.int64)
    kept_rows = np.union1d(txt, vis[keep])
    early = prune_kv_cache(KvCache(tuple(caches)), keep, cfg.selection.protected_layers, pos[vis])

    h, pos = h[kept_rows], pos[kept_rows]
    late: list[LayerKv] = []
    for layer in range(sel_layer + 1, n_layers):
        h, kv, v, _ = block_forward(model, layer, h, pos)
        late.append(kv)
        values.append(v)
    cache = KvCache(early.layers + tuple(late))

    full_rows = [seq.total_len] * n_layers
    stats = stats_from_rows(
        full_rows,
        cache.row_counts(),
        model.cfg.n_heads,
        model.cfg.head_dim,
        sel_layer,
        cfg.bytes_per_element,
        model.cfg.readout_dim,
    )
    visual_kept = [r - seq.text_len for r in cache.row_counts()]
    pct = 100.0 * float(np.mean(visual_kept)) / seq.visual_len
    return PruneRun(
        readout(model, h), cache, selection, replace(stats, avg_tokens_pct=pct), kept_rows, values
    )
