"""Alternative retained-token patterns compared against IVC tokens in ablations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ivc_prune.layout import GridLayout
from ivc_prune.rope_core import RopeConfig, score_table
from ivc_prune.selection import ivc_select

__all__ = [
    "GridLayout",
    "PatternSpec",
    "PATTERN_KINDS",
    "generate_pattern",
    "pattern_union_with_foreground",
]

PATTERN_KINDS = ("none", "random", "c_points", "window", "diagonal", "ivc")


@dataclass(frozen=True)
class PatternSpec:
    kind: str
    ratio: float = 0.15
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}; expected one of {PATTERN_KINDS}")
        if self.kind in ("random", "ivc") and not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")

    @classmethod
    def from_dict(cls, data: dict) -> "PatternSpec":
        return cls(**data)


def _cells_to_indices(layout: GridLayout, cells: Iterable[tuple[int, int]]) -> list[int]:
    return [layout.cell_index(r, c) for r, c in cells]


def _diagonal_cells(h: int, w: int) -> set[tuple[int, int]]:
    steps = max(h, w)
    cells = set()
    for t in range(steps):
        frac = t / (steps - 1) if steps > 1 else 0.0
        r = int(round(frac * (h - 1)))
        c = int(round(frac * (w - 1)))
        cells.add((r, c))
        cells.add((r, w - 1 - c))
    return cells


def generate_pattern(spec: PatternSpec, layout: GridLayout, rope_cfg: RopeConfig) -> np.ndarray:
    h, w = layout.height, layout.width
    n = layout.n_tokens
    if spec.kind == "none":
        idx: Sequence[int] = []
    elif spec.kind == "random":
        rng = np.random.default_rng(spec.rng_seed)
        idx = rng.choice(n, size=min(n, math.ceil(spec.ratio * n - 1e-9)), replace=False)
    elif spec.kind == "c_points":
        if h < 2 or w < 2:
            raise ValueError(f"c_points needs a grid of at least 2x2, got {h}x{w}")
        corners = [(0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1), (h // 2, w // 2)]
        idx = _cells_to_indices(layout, corners)
    elif spec.kind == "window":
        ring = [(r, c) for r in range(h) for c in range(w) if r in (0, h - 1) or c in (0, w - 1)]
        idx = _cells_to_indices(layout, ring)
    elif spec.kind == "diagonal":
        idx = _cells_to_indices(layout, _diagonal_cells(h, w))
    else:
        idx = ivc_select(score_table(n, rope_cfg, layout), spec.ratio, layout)
    out = np.union1d(np.asarray(idx, dtype=np.int64), layout.protected)
    return out.astype(np.int64)


def pattern_union_with_foreground(pattern: Sequence[int], foreground: Sequence[int]) -> np.ndarray:
    return np.union1d(np.asarray(pattern, dtype=np.int64), np.asarray(foreground, dtype=np.int64))
