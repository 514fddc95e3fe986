"""Slow, independent reimplementations used as test oracles.

Nothing here calls the vectorized paths under test: rotations are built from
explicit 2x2 blocks with ``math.cos``/``math.sin``, attention is a per-token,
per-head loop, and stage scores are scalar double loops.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import block_diag


def theta(head_dim: int, base: float = 10000.0) -> list[float]:
    return [base ** (-2.0 * k / head_dim) for k in range(head_dim // 2)]


def explicit_rotation(m: float, head_dim: int, base: float = 10000.0) -> np.ndarray:
    blocks = [
        np.array([[math.cos(m * t), -math.sin(m * t)], [math.sin(m * t), math.cos(m * t)]])
        for t in theta(head_dim, base)
    ]
    return block_diag(*blocks)


def explicit_j(head_dim: int) -> np.ndarray:
    return block_diag(*([np.array([[0.0, -1.0], [1.0, 0.0]])] * (head_dim // 2)))


def frobenius_sq(a: np.ndarray) -> float:
    return float(sum(x * x for x in a.ravel()))


def scalar_stage_scores(v_query: np.ndarray, v_img: np.ndarray) -> list[float]:
    """Mean over queries of per-query softmax over image tokens, by hand."""
    n_q, d = v_query.shape
    n = v_img.shape[0]
    acc = [0.0] * n
    for i in range(n_q):
        logits = []
        for j in range(n):
            dot = 0.0
            for c in range(d):
                dot += float(v_query[i, c]) * float(v_img[j, c])
            logits.append(dot / math.sqrt(d))
        top = max(logits)
        exps = [math.exp(x - top) for x in logits]
        z = sum(exps)
        for j in range(n):
            acc[j] += exps[j] / z
    return [a / n_q for a in acc]


# ---------------------------------------------------------------- naive decoder

def _rms(x: np.ndarray) -> np.ndarray:
    return x / math.sqrt(float(np.mean(x * x)) + 1e-6)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


class NaiveDecoder:
    """Token-at-a-time reference of the toy decoder."""

    def __init__(self, model):
        self.model = model
        self.cfg = model.cfg
        self._rot: dict[int, np.ndarray] = {}

    def rot(self, pos: int) -> np.ndarray:
        if pos not in self._rot:
            self._rot[pos] = explicit_rotation(pos, self.cfg.head_dim, self.cfg.rope_base)
        return self._rot[pos]

    def kv(self, layer: int, h_row: np.ndarray, pos: int):
        """Per-head rotated key and raw value of one token."""
        lw = self.model.layers[layer]
        x = _rms(h_row)
        hd = self.cfg.head_dim
        keys, vals = [], []
        for head in range(self.cfg.n_heads):
            sl = slice(head * hd, (head + 1) * hd)
            keys.append(self.rot(pos) @ (lw.wk[sl] @ x))
            vals.append(lw.wv[sl] @ x)
        return keys, vals

    def token_out(self, layer: int, h_row: np.ndarray, pos: int, ctx_keys, ctx_vals, ctx_pos) -> np.ndarray:
        """Block output for one query token attending to the given (key, value, pos) context."""
        lw = self.model.layers[layer]
        x = _rms(h_row)
        hd = self.cfg.head_dim
        heads = []
        for head in range(self.cfg.n_heads):
            sl = slice(head * hd, (head + 1) * hd)
            q = self.rot(pos) @ (lw.wq[sl] @ x)
            logits = [
                float(q @ k[head]) / math.sqrt(hd) for k, p in zip(ctx_keys, ctx_pos) if p <= pos
            ]
            vs = [v[head] for v, p in zip(ctx_vals, ctx_pos) if p <= pos]
            top = max(logits)
            w = [math.exp(s - top) for s in logits]
            z = sum(w)
            heads.append(sum((wi / z) * vi for wi, vi in zip(w, vs)))
        h = h_row + lw.wo @ np.concatenate(heads)
        return h + lw.w_down @ _gelu(lw.w_up @ _rms(h))

    def layer(self, layer: int, h: np.ndarray, positions) -> tuple[np.ndarray, list, list]:
        kvs = [self.kv(layer, h[t], int(positions[t])) for t in range(len(h))]
        keys = [k for k, _ in kvs]
        vals = [v for _, v in kvs]
        out = np.stack(
            [self.token_out(layer, h[t], int(positions[t]), keys, vals, positions) for t in range(len(h))]
        )
        return out, keys, vals

    def readout(self, h: np.ndarray) -> np.ndarray:
        return np.stack([self.model.readout @ _rms(row) for row in h])

    def forward(self, emb: np.ndarray, positions) -> np.ndarray:
        h = np.asarray(emb, dtype=np.float64)
        for layer in range(self.cfg.n_layers):
            h, _, _ = self.layer(layer, h, positions)
        return self.readout(h)

    def pruned_prefill(self, emb, positions, kept_rows, sel_layer):
        """Rebuild the reduced sequence after ``sel_layer`` and rerun later layers from scratch.

        Returns logits of the kept rows and, per layer, the (keys, values, positions)
        context the layer exposes to later decode steps before cache filtering.
        """
        h = np.asarray(emb, dtype=np.float64)
        positions = [int(p) for p in positions]
        contexts = []
        for layer in range(sel_layer + 1):
            h, keys, vals = self.layer(layer, h, positions)
            contexts.append((keys, vals, positions))
        h = h[kept_rows]
        positions = [positions[r] for r in kept_rows]
        for layer in range(sel_layer + 1, self.cfg.n_layers):
            h, keys, vals = self.layer(layer, h, positions)
            contexts.append((keys, vals, positions))
        return self.readout(h), contexts

    def decode(self, contexts, new_emb: np.ndarray, new_pos: int) -> np.ndarray:
        h = np.asarray(new_emb, dtype=np.float64)
        for layer, (keys, vals, positions) in enumerate(contexts):
            k_new, v_new = self.kv(layer, h, new_pos)
            h = self.token_out(
                layer, h, new_pos, keys + [k_new], vals + [v_new], list(positions) + [new_pos]
            )
        return self.model.readout @ _rms(h)


def filter_context(context, allowed_positions: set[int]):
    keys, vals, positions = context
    keep = [i for i, p in enumerate(positions) if p in allowed_positions]
    return [keys[i] for i in keep], [vals[i] for i in keep], [positions[i] for i in keep]
