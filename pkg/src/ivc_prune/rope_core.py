"""RoPE mathematics and the coordinate scores used for IVC token selection.

Rotation pairs are adjacent dimensions ``(2k, 2k+1)`` so that the rotation of a
position is the block-diagonal matrix ``diag(R(m, theta_0), ..., R(m, theta_{d/2-1}))``.
Everything is computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ivc_prune.layout import GridLayout

__all__ = [
    "RopeConfig",
    "ScoreTable",
    "frequencies",
    "rotation_matrix",
    "j_matrix",
    "apply_rope",
    "apply_rope_rows",
    "v_score",
    "u_score",
    "frobenius_to_identity",
    "frobenius_to_j",
    "score_table",
    "relative_attention_score",
]


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    axis_split: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if not self.base > 1:
            raise ValueError(f"base must be > 1, got {self.base}")
        if self.axis_split is not None:
            split = tuple(int(s) for s in self.axis_split)
            if any(s <= 0 for s in split) or sum(split) != self.head_dim // 2:
                raise ValueError(
                    f"axis_split {split} must be positive and sum to head_dim/2={self.head_dim // 2}"
                )
            object.__setattr__(self, "axis_split", split)

    @property
    def n_pairs(self) -> int:
        return self.head_dim // 2

    def pair_axis(self) -> np.ndarray:
        """Axis id feeding each rotation pair (all zeros for 1D RoPE)."""
        if self.axis_split is None:
            return np.zeros(self.n_pairs, dtype=np.int64)
        return np.repeat(np.arange(len(self.axis_split)), self.axis_split)


@dataclass(frozen=True)
class ScoreTable:
    v_scores: np.ndarray
    u_scores: np.ndarray

    def __post_init__(self) -> None:
        if self.v_scores.shape != self.u_scores.shape or self.v_scores.ndim != 1:
            raise ValueError("v_scores and u_scores must be 1D arrays of equal length")
        if len(self.v_scores) < 1:
            raise ValueError("score table must have at least one position")

    @property
    def length(self) -> int:
        return len(self.v_scores)


def frequencies(cfg: RopeConfig) -> np.ndarray:
    k = np.arange(cfg.n_pairs, dtype=np.float64)
    return np.power(float(cfg.base), -2.0 * k / cfg.head_dim)


def _angles(m, cfg: RopeConfig) -> np.ndarray:
    """Per-pair rotation angles for a scalar position or a per-axis position tuple."""
    theta = frequencies(cfg)
    if np.ndim(m) == 0:
        return float(m) * theta
    pos = np.asarray(m, dtype=np.float64)
    axis = cfg.pair_axis()
    if len(pos) != axis.max() + 1:
        raise ValueError(f"expected {axis.max() + 1} axis positions, got {len(pos)}")
    return pos[axis] * theta


def _check_position(m) -> None:
    if np.any(np.asarray(m) < 0):
        raise ValueError(f"positions must be nonnegative, got {m}")


def rotation_matrix(m, cfg: RopeConfig) -> np.ndarray:
    _check_position(m)
    ang = _angles(m, cfg)
    c, s = np.cos(ang), np.sin(ang)
    out = np.zeros((cfg.head_dim, cfg.head_dim))
    idx = np.arange(cfg.n_pairs) * 2
    out[idx, idx] = c
    out[idx, idx + 1] = -s
    out[idx + 1, idx] = s
    out[idx + 1, idx + 1] = c
    return out


def j_matrix(cfg: RopeConfig) -> np.ndarray:
    """Block-diagonal 90-degree rotation diag(J2, ..., J2)."""
    out = np.zeros((cfg.head_dim, cfg.head_dim))
    idx = np.arange(cfg.n_pairs) * 2
    out[idx, idx + 1] = -1.0
    out[idx + 1, idx] = 1.0
    return out


def apply_rope(v: Sequence[float], m, cfg: RopeConfig) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cfg.head_dim,):
        raise ValueError(f"expected vector of length {cfg.head_dim}, got shape {v.shape}")
    _check_position(m)
    return apply_rope_rows(v[None, :], np.asarray([m]), cfg)[0]


def apply_rope_rows(x: np.ndarray, positions: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """Rotate every row of ``x[..., T, head_dim]`` by its position.

    ``positions`` is ``(T,)`` for 1D RoPE or ``(T, n_axes)`` when ``axis_split`` is set.
    A 1D position array with ``axis_split`` feeds the same index to every axis.
    """
    positions = np.asarray(positions)
    theta = frequencies(cfg)
    if positions.ndim == 1:
        ang = positions[:, None].astype(np.float64) * theta[None, :]
    else:
        ang = positions[:, cfg.pair_axis()].astype(np.float64) * theta[None, :]
    c, s = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(x.shape, dtype=np.float64)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def v_score(m, cfg: RopeConfig) -> float:
    """Real-axis score: how close R_m is to the identity (larger is closer)."""
    _check_position(m)
    return float(np.sum(np.cos(_angles(m, cfg))))


def u_score(m, cfg: RopeConfig) -> float:
    """Imaginary-axis score: how close R_m is to the block 90-degree rotation."""
    _check_position(m)
    return float(np.sum(np.sin(_angles(m, cfg))))


def frobenius_to_identity(m, cfg: RopeConfig) -> float:
    _check_position(m)
    return float(np.sum(4.0 * (1.0 - np.cos(_angles(m, cfg)))))


def frobenius_to_j(m, cfg: RopeConfig) -> float:
    _check_position(m)
    return float(np.sum(4.0 * (1.0 - np.sin(_angles(m, cfg)))))


def _layout_positions(layout: GridLayout, cfg: RopeConfig) -> np.ndarray:
    if cfg.axis_split is None:
        return layout.local_positions()
    local = layout.local_coords()
    n_axes = len(cfg.axis_split)
    if n_axes == 1:
        return layout.local_positions()
    # trailing two axes are (row, col); leading axes (e.g. temporal) sit at 0
    pos = np.zeros((layout.n_tokens, n_axes), dtype=np.int64)
    pos[:, -2:] = local
    return pos


def score_table(n: int, cfg: RopeConfig, layout: GridLayout | None = None) -> ScoreTable:
    """V and U scores for every visual position 0..n-1.

    With a layout, each tile (or line, when separators are present) is scored by
    its local offset, and protected tokens score -inf on both axes.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    theta = frequencies(cfg)
    if layout is None:
        ang = np.arange(n, dtype=np.float64)[:, None] * theta[None, :]
        return ScoreTable(np.cos(ang).sum(axis=1), np.sin(ang).sum(axis=1))
    if layout.n_tokens != n:
        raise ValueError(f"layout has {layout.n_tokens} tokens but n={n}")
    pos = _layout_positions(layout, cfg)
    if pos.ndim == 1:
        ang = pos[:, None].astype(np.float64) * theta[None, :]
    else:
        ang = pos[:, cfg.pair_axis()].astype(np.float64) * theta[None, :]
    v = np.cos(ang).sum(axis=1)
    u = np.sin(ang).sum(axis=1)
    v[layout.protected] = -np.inf
    u[layout.protected] = -np.inf
    return ScoreTable(v, u)


def relative_attention_score(
    x_n: np.ndarray,
    x_m: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    n: int,
    m: int,
    cfg: RopeConfig,
) -> float:
    """Pre-softmax attention logit between a query at position n and a key at m."""
    x_n, x_m = np.asarray(x_n, dtype=np.float64), np.asarray(x_m, dtype=np.float64)
    wq, wk = np.asarray(wq, dtype=np.float64), np.asarray(wk, dtype=np.float64)
    if wq.shape != (cfg.head_dim, x_n.shape[0]) or wk.shape != (cfg.head_dim, x_m.shape[0]):
        raise ValueError(
            f"projection shapes {wq.shape}, {wk.shape} inconsistent with head_dim {cfg.head_dim} "
            f"and inputs {x_n.shape}, {x_m.shape}"
        )
    q = apply_rope(wq @ x_n, n, cfg)
    k = apply_rope(wk @ x_m, m, cfg)
    return float(q @ k)
