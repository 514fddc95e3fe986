"""Token selection over visual tokens.

Two kinds of tokens survive pruning:

* IVC tokens, whose RoPE rotation is closest to the identity (top V scores) or
  to a 90-degree turn (top U scores). They depend only on positions.
* Foreground tokens, chosen by value-vector similarity to the prompt in two
  stages: text values pick a handful of seed image tokens, then text plus seeds
  vote for the foreground.

Value vectors carry no rotation, so foreground scores do not depend on where a
token sits in the sequence. All top-k calls break ties toward the lower index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ivc_prune.layout import GridLayout
from ivc_prune.rope_core import RopeConfig, ScoreTable, score_table

__all__ = [
    "SelectionConfig",
    "SelectionResult",
    "topk_indices",
    "ivc_budget",
    "ivc_select",
    "ivc_is_degenerate",
    "value_attention_scores",
    "seed_size",
    "foreground_size",
    "semantic_seed",
    "foreground_refine",
    "select_tokens",
    "map_to_tiles",
    "select_per_frame",
]

# guards ceil/floor of budget products against float noise such as 0.1 * 30
_BUDGET_EPS = 1e-9


def _ceil(x: float) -> int:
    return math.ceil(x - _BUDGET_EPS)


def _floor(x: float) -> int:
    return math.floor(x + _BUDGET_EPS)


@dataclass(frozen=True)
class SelectionConfig:
    k_c: float = 0.10
    k_f: float = 0.40
    seed_fraction: float = 0.01
    selection_layer: int = 0
    protected_layers: frozenset[int] = frozenset()
    text_range: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        for name in ("k_c", "k_f", "seed_fraction"):
            val = getattr(self, name)
            if not 0.0 < val <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {val}")
        if self.selection_layer < 0:
            raise ValueError(f"selection_layer must be >= 0, got {self.selection_layer}")
        object.__setattr__(self, "protected_layers", frozenset(int(x) for x in self.protected_layers))
        if self.text_range is not None:
            lo, hi = self.text_range
            if not 0 <= lo < hi:
                raise ValueError(f"text_range must be a nonempty [lo, hi) span, got {self.text_range}")
            object.__setattr__(self, "text_range", (int(lo), int(hi)))

    @classmethod
    def from_dict(cls, data: dict) -> "SelectionConfig":
        data = dict(data)
        if "protected_layers" in data:
            data["protected_layers"] = frozenset(data["protected_layers"])
        if data.get("text_range") is not None:
            data["text_range"] = tuple(data["text_range"])
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "k_c": self.k_c,
            "k_f": self.k_f,
            "seed_fraction": self.seed_fraction,
            "selection_layer": self.selection_layer,
            "protected_layers": sorted(self.protected_layers),
            "text_range": list(self.text_range) if self.text_range else None,
        }


@dataclass(frozen=True)
class SelectionResult:
    n: int
    ivc: tuple[int, ...]
    seed: tuple[int, ...]
    foreground: tuple[int, ...]
    selected: tuple[int, ...]
    position_ids: tuple[int, ...]  # original position id of every selected index
    k_c: float = 0.10
    k_f: float = 0.40
    ivc_degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "k_c": self.k_c,
            "k_f": self.k_f,
            "ivc": list(self.ivc),
            "seed": list(self.seed),
            "foreground": list(self.foreground),
            "selected": list(self.selected),
            "position_ids": list(self.position_ids),
            "ivc_degenerate": self.ivc_degenerate,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SelectionResult":
        return cls(
            n=int(data["n"]),
            ivc=tuple(data["ivc"]),
            seed=tuple(data["seed"]),
            foreground=tuple(data["foreground"]),
            selected=tuple(data["selected"]),
            position_ids=tuple(data.get("position_ids", data["selected"])),
            k_c=float(data["k_c"]),
            k_f=float(data["k_f"]),
            ivc_degenerate=bool(data.get("ivc_degenerate", False)),
        )


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties to the lower index, returned sorted."""
    scores = np.asarray(scores, dtype=np.float64)
    k = max(0, min(int(k), len(scores)))
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def ivc_budget(n: int, k_c: float) -> tuple[int, int]:
    """Per-axis (V, U) budgets for a span of n positions.

    The total IVC budget ceil(k_c * n) is split with V taking the larger half,
    so the union never exceeds the total. Spans where k_c * n < 2 keep only the
    V argmax.
    """
    if k_c * n < 2 - _BUDGET_EPS:
        return 1, 0
    total = _ceil(k_c * n)
    b_v = _ceil(k_c * n / 2)
    return b_v, total - b_v


def ivc_select(table: ScoreTable, k_c: float, layout: GridLayout | None = None) -> np.ndarray:
    n = table.length
    if layout is not None and layout.n_tokens != n:
        raise ValueError(f"layout has {layout.n_tokens} tokens but score table has {n}")
    spans = layout.segments if layout is not None else ((0, n),)
    picked: list[np.ndarray] = []
    for start, stop in spans:
        b_v, b_u = ivc_budget(stop - start, k_c)
        picked.append(start + topk_indices(table.v_scores[start:stop], b_v))
        picked.append(start + topk_indices(table.u_scores[start:stop], b_u))
    if layout is not None:
        picked.append(layout.protected)
    return np.unique(np.concatenate(picked)).astype(np.int64)


def ivc_is_degenerate(n: int, k_c: float, layout: GridLayout | None = None) -> bool:
    spans = layout.segments if layout is not None else ((0, n),)
    return any(ivc_budget(stop - start, k_c)[1] == 0 for start, stop in spans)


def value_attention_scores(v_query: np.ndarray, v_img: np.ndarray) -> np.ndarray:
    """Mean over query rows of the row-softmax of scaled value similarities."""
    v_query = np.asarray(v_query, dtype=np.float64)
    v_img = np.asarray(v_img, dtype=np.float64)
    logits = v_query @ v_img.T / np.sqrt(v_img.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return probs.mean(axis=0)


def seed_size(n: int, seed_fraction: float) -> int:
    return max(1, _ceil(seed_fraction * n))


def foreground_size(n: int, k_f: float) -> int:
    return _floor(k_f * n)


def semantic_seed(
    v_text: np.ndarray, v_img: np.ndarray, seed_fraction: float = 0.01
) -> tuple[np.ndarray, np.ndarray]:
    v_text = np.asarray(v_text, dtype=np.float64)
    v_img = np.asarray(v_img, dtype=np.float64)
    if v_text.ndim != 2 or v_text.shape[0] == 0:
        raise ValueError("no text tokens")
    if v_img.ndim != 2 or v_img.shape[0] == 0 or v_img.shape[1] != v_text.shape[1]:
        raise ValueError(f"image values {v_img.shape} incompatible with text values {v_text.shape}")
    s = value_attention_scores(v_text, v_img)
    return s, topk_indices(s, seed_size(len(s), seed_fraction))


def foreground_refine(
    v_text: np.ndarray, v_img: np.ndarray, seed: Sequence[int], k_f: float = 0.40
) -> tuple[np.ndarray, np.ndarray]:
    v_text = np.asarray(v_text, dtype=np.float64)
    v_img = np.asarray(v_img, dtype=np.float64)
    seed = np.asarray(seed, dtype=np.int64)
    n = v_img.shape[0]
    if seed.size == 0:
        raise ValueError("empty seed set: foreground refinement needs the seed stage output")
    if seed.min() < 0 or seed.max() >= n:
        raise ValueError(f"seed indices {seed.tolist()} outside 0..{n - 1}")
    v_query = np.concatenate([v_text.reshape(-1, v_img.shape[1]), v_img[seed]], axis=0)
    f = value_attention_scores(v_query, v_img)
    return f, topk_indices(f, foreground_size(n, k_f))


def _text_slice(v_text: np.ndarray, cfg: SelectionConfig) -> np.ndarray:
    if cfg.text_range is None:
        return v_text
    lo, hi = cfg.text_range
    return v_text[lo:hi]


def select_tokens(
    v_text: np.ndarray,
    v_img: np.ndarray,
    table: ScoreTable,
    cfg: SelectionConfig = SelectionConfig(),
    layout: GridLayout | None = None,
    position_ids: Sequence[int] | None = None,
) -> SelectionResult:
    """Full selection: IVC tokens united with the two-stage foreground.

    ``position_ids`` gives the original position of each visual token; it defaults
    to the visual index itself and is carried through untouched.
    """
    v_img = np.asarray(v_img, dtype=np.float64)
    n = v_img.shape[0]
    if table.length != n:
        raise ValueError(f"score table covers {table.length} positions, got {n} image tokens")
    ivc = ivc_select(table, cfg.k_c, layout)
    _, seed = semantic_seed(_text_slice(np.asarray(v_text), cfg), v_img, cfg.seed_fraction)
    _, fg = foreground_refine(_text_slice(np.asarray(v_text), cfg), v_img, seed, cfg.k_f)
    selected = np.union1d(ivc, fg)
    pos = np.arange(n) if position_ids is None else np.asarray(position_ids, dtype=np.int64)
    return SelectionResult(
        n=n,
        ivc=tuple(int(i) for i in ivc),
        seed=tuple(int(i) for i in seed),
        foreground=tuple(int(i) for i in fg),
        selected=tuple(int(i) for i in selected),
        position_ids=tuple(int(pos[i]) for i in selected),
        k_c=cfg.k_c,
        k_f=cfg.k_f,
        ivc_degenerate=ivc_is_degenerate(n, cfg.k_c, layout),
    )


def map_to_tiles(
    thumb_fg: Sequence[int], thumb_layout: GridLayout, tile_layout: GridLayout
) -> np.ndarray:
    """Expand thumbnail foreground cells to the tile-grid tokens they cover."""
    if tile_layout.height % thumb_layout.height or tile_layout.width % thumb_layout.width:
        raise ValueError(
            f"tile grid {tile_layout.height}x{tile_layout.width} is not an integer multiple of "
            f"thumbnail {thumb_layout.height}x{thumb_layout.width}"
        )
    sy = tile_layout.height // thumb_layout.height
    sx = tile_layout.width // thumb_layout.width
    out: set[int] = set()
    for idx in thumb_fg:
        r, c = thumb_layout.coords[int(idx)]
        if r < 0:
            continue  # special tokens have no spatial footprint
        for rr in range(r * sy, (r + 1) * sy):
            for cc in range(c * sx, (c + 1) * sx):
                out.add(tile_layout.cell_index(rr, cc))
    return np.asarray(sorted(out), dtype=np.int64)


def select_per_frame(
    frames: Sequence[tuple[np.ndarray, GridLayout | None]],
    v_text: np.ndarray,
    cfg: SelectionConfig,
    rope: RopeConfig,
) -> list[SelectionResult]:
    """Select tokens independently in every video frame with a shared prompt."""
    if not frames:
        raise ValueError("at least one frame is required")
    results = []
    for v_img, layout in frames:
        n = np.asarray(v_img).shape[0]
        results.append(select_tokens(v_text, v_img, score_table(n, rope, layout), cfg, layout))
    return results
