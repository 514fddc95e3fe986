"""Visual-token grid geometry.

A layout maps each visual token index to a grid cell (row, col) or marks it as
a protected special token (line separators in DeepSeek-VL2 style tiles).
Tokens are emitted tile by tile; inside a tile they follow raster order
(row-major by default). Protected separators, when enabled, follow the last
cell of every line of every tile.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = ["GridLayout"]


@dataclass(frozen=True)
class GridLayout:
    height: int
    width: int
    row_major: bool = True
    tile_grid: tuple[int, int] | None = None
    line_separators: bool = False

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if self.tile_grid is not None:
            tr, tc = self.tile_grid
            if tr < 1 or tc < 1 or self.height % tr or self.width % tc:
                raise ValueError(
                    f"tile grid {self.tile_grid} does not evenly divide {self.height}x{self.width}"
                )
            object.__setattr__(self, "tile_grid", (int(tr), int(tc)))

    @classmethod
    def from_dict(cls, data: dict) -> "GridLayout":
        tiles = data.get("tile_grid")
        return cls(
            height=int(data["height"]),
            width=int(data["width"]),
            row_major=bool(data.get("row_major", True)),
            tile_grid=tuple(tiles) if tiles else None,
            line_separators=bool(data.get("line_separators", False)),
        )

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "row_major": self.row_major,
            "tile_grid": list(self.tile_grid) if self.tile_grid else None,
            "line_separators": self.line_separators,
        }

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    @property
    def n_tokens(self) -> int:
        return self.n_cells + len(self.protected)

    @property
    def tile_shape(self) -> tuple[int, int]:
        tr, tc = self.tile_grid or (1, 1)
        return self.height // tr, self.width // tc

    @cached_property
    def _built(self) -> tuple[np.ndarray, np.ndarray, tuple[tuple[int, int], ...]]:
        tr, tc = self.tile_grid or (1, 1)
        th, tw = self.tile_shape
        coords: list[tuple[int, int]] = []
        protected: list[int] = []
        segments: list[tuple[int, int]] = []
        for ti in range(tr):
            for tj in range(tc):
                tile_start = len(coords)
                outer, inner = (th, tw) if self.row_major else (tw, th)
                for a in range(outer):
                    line_start = len(coords)
                    for b in range(inner):
                        r, c = (a, b) if self.row_major else (b, a)
                        coords.append((ti * th + r, tj * tw + c))
                    if self.line_separators:
                        segments.append((line_start, len(coords)))
                        protected.append(len(coords))
                        coords.append((-1, -1))
                if not self.line_separators:
                    segments.append((tile_start, len(coords)))
        return np.asarray(coords, dtype=np.int64), np.asarray(protected, dtype=np.int64), tuple(segments)

    @property
    def coords(self) -> np.ndarray:
        """(n_tokens, 2) array of (row, col); protected tokens carry (-1, -1)."""
        return self._built[0]

    @property
    def protected(self) -> np.ndarray:
        return self._built[1]

    @property
    def segments(self) -> tuple[tuple[int, int], ...]:
        """Half-open index spans scored and IVC-selected independently.

        One span per tile, or one per line when separators are present.
        A span never contains a protected index.
        """
        return self._built[2]

    @cached_property
    def _cell_to_index(self) -> np.ndarray:
        table = np.full((self.height, self.width), -1, dtype=np.int64)
        for idx, (r, c) in enumerate(self.coords):
            if r >= 0:
                table[r, c] = idx
        return table

    def cell_index(self, row: int, col: int) -> int:
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise IndexError(f"cell ({row}, {col}) outside {self.height}x{self.width} grid")
        return int(self._cell_to_index[row, col])

    def local_positions(self) -> np.ndarray:
        """Within-segment offset of every token; protected tokens get -1."""
        local = np.full(self.n_tokens, -1, dtype=np.int64)
        for start, stop in self.segments:
            local[start:stop] = np.arange(stop - start)
        return local

    def local_coords(self) -> np.ndarray:
        """(row, col) of every token relative to its own tile."""
        th, tw = self.tile_shape
        out = self.coords.copy()
        cells = out[:, 0] >= 0
        out[cells, 0] %= th
        out[cells, 1] %= tw
        return out
