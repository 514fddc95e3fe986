"""Deterministic toy decoder-only transformer with RoPE attention and a KV cache.

Pre-norm blocks (RMSNorm without gain), multi-head attention with RoPE applied
to queries and keys only, a GELU MLP with expansion 4, no biases. Inputs are
continuous embeddings; "logits" are the final normed hidden states passed
through a fixed random readout.

Causal masking compares position ids rather than row indices, so a cache whose
rows skip positions (after pruning) is attended to exactly like the unpruned
sequence restricted to the surviving rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ivc_prune.rope_core import RopeConfig, apply_rope_rows

__all__ = [
    "ModelConfig",
    "TokenSequence",
    "LayerWeights",
    "Model",
    "KvCache",
    "LayerKv",
    "ForwardResult",
    "init_model",
    "forward_full",
    "decode_step",
    "make_sequence",
]

MLP_EXPANSION = 4
_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 2
    head_dim: int = 8
    rope_base: float = 10000.0
    init_seed: int = 0
    out_dim: int | None = None

    def __post_init__(self) -> None:
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("n_layers and n_heads must be positive")
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")

    @property
    def hidden_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def readout_dim(self) -> int:
        return self.out_dim or self.hidden_dim

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.rope_base)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {"n_layers", "n_heads", "head_dim", "rope_base", "init_seed", "out_dim"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "rope_base": self.rope_base,
            "init_seed": self.init_seed,
            "out_dim": self.out_dim,
        }


@dataclass(frozen=True)
class TokenSequence:
    """Text and visual embeddings in one sequence.

    Visual tokens occupy rows ``visual_offset : visual_offset + visual_len``; every
    other row is text.
    """

    embeddings: np.ndarray
    position_ids: np.ndarray
    visual_offset: int
    visual_len: int

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float64)
        pos = np.asarray(self.position_ids, dtype=np.int64)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "position_ids", pos)
        if emb.ndim != 2 or pos.shape != (emb.shape[0],):
            raise ValueError(f"embeddings {emb.shape} and position_ids {pos.shape} disagree")
        if np.any(np.diff(pos) <= 0):
            raise ValueError("position_ids must be strictly increasing")
        if self.visual_len < 1 or self.visual_offset < 0 or self.visual_offset + self.visual_len > len(pos):
            raise ValueError("visual span outside the sequence")

    @property
    def total_len(self) -> int:
        return self.embeddings.shape[0]

    @property
    def text_len(self) -> int:
        return self.total_len - self.visual_len

    @property
    def visual_rows(self) -> np.ndarray:
        return np.arange(self.visual_offset, self.visual_offset + self.visual_len)

    @property
    def text_rows(self) -> np.ndarray:
        rows = np.arange(self.total_len)
        return rows[(rows < self.visual_offset) | (rows >= self.visual_offset + self.visual_len)]


def make_sequence(
    text_len: int,
    visual_len: int,
    hidden_dim: int,
    seed: int,
    visual_offset: int | None = None,
) -> TokenSequence:
    """Seeded standard-normal embeddings; the visual span sits mid-prompt by default."""
    if visual_offset is None:
        visual_offset = text_len // 2
    rng = np.random.default_rng(seed)
    total = text_len + visual_len
    return TokenSequence(
        embeddings=rng.standard_normal((total, hidden_dim)),
        position_ids=np.arange(total),
        visual_offset=visual_offset,
        visual_len=visual_len,
    )


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray  # (D, D), output rows grouped per head
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_up: np.ndarray  # (4D, D)
    w_down: np.ndarray  # (D, 4D)


@dataclass(frozen=True)
class Model:
    cfg: ModelConfig
    layers: tuple[LayerWeights, ...]
    readout: np.ndarray  # (out_dim, D)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for lw in self.layers:
            for w in (lw.wq, lw.wk, lw.wv, lw.wo, lw.w_up, lw.w_down):
                h.update(w.tobytes())
        h.update(self.readout.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class LayerKv:
    keys: np.ndarray  # (n_heads, rows, head_dim), RoPE already applied
    values: np.ndarray  # (n_heads, rows, head_dim)
    position_ids: np.ndarray  # (rows,)

    @property
    def rows(self) -> int:
        return len(self.position_ids)


@dataclass(frozen=True)
class KvCache:
    layers: tuple[LayerKv, ...]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def row_counts(self) -> list[int]:
        return [layer.rows for layer in self.layers]


@dataclass
class ForwardResult:
    logits: np.ndarray
    cache: KvCache
    values: list[np.ndarray]  # per layer, (T, D) with heads concatenated
    attention: list[np.ndarray] = field(default_factory=list)  # per layer, (H, T, T_keys)


def init_model(cfg: ModelConfig) -> Model:
    rng = np.random.default_rng(cfg.init_seed)
    d = cfg.hidden_dim
    hid = MLP_EXPANSION * d

    def draw(rows: int, cols: int) -> np.ndarray:
        return rng.standard_normal((rows, cols)) / np.sqrt(cols)

    layers = tuple(
        LayerWeights(
            wq=draw(d, d), wk=draw(d, d), wv=draw(d, d), wo=draw(d, d),
            w_up=draw(hid, d), w_down=draw(d, hid),
        )
        for _ in range(cfg.n_layers)
    )
    return Model(cfg, layers, draw(cfg.readout_dim, d))


def rms_norm(x: np.ndarray) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=axis, keepdims=True)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, hd = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * hd)


def project_qkv(
    model: Model, layer: int, h: np.ndarray, positions: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotated per-head queries and keys plus unrotated values for hidden states ``h``."""
    lw = model.layers[layer]
    x = rms_norm(h)
    nh, rope = model.cfg.n_heads, model.cfg.rope
    q = apply_rope_rows(_split_heads(x @ lw.wq.T, nh), positions, rope)
    k = apply_rope_rows(_split_heads(x @ lw.wk.T, nh), positions, rope)
    v = _split_heads(x @ lw.wv.T, nh)
    return q, k, v


def _attend(
    q: np.ndarray, q_pos: np.ndarray, kv: LayerKv
) -> tuple[np.ndarray, np.ndarray]:
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.einsum("htd,hsd->hts", q, kv.keys) * scale
    mask = kv.position_ids[None, :] > q_pos[:, None]
    scores = np.where(mask[None], -np.inf, scores)
    attn = softmax(scores, axis=-1)
    return np.einsum("hts,hsd->htd", attn, kv.values), attn


def block_forward(
    model: Model,
    layer: int,
    h: np.ndarray,
    positions: np.ndarray,
    past: LayerKv | None = None,
) -> tuple[np.ndarray, LayerKv, np.ndarray, np.ndarray]:
    """Run one decoder block.

    Returns the new hidden states, the layer cache (past rows followed by the new
    rows), the new rows' values with heads concatenated, and attention weights.
    """
    lw = model.layers[layer]
    q, k, v = project_qkv(model, layer, h, positions)
    if past is None:
        kv = LayerKv(k, v, np.asarray(positions, dtype=np.int64))
    else:
        kv = LayerKv(
            np.concatenate([past.keys, k], axis=1),
            np.concatenate([past.values, v], axis=1),
            np.concatenate([past.position_ids, positions]).astype(np.int64),
        )
    ctx, attn = _attend(q, positions, kv)
    h = h + _merge_heads(ctx) @ lw.wo.T
    h = h + gelu(rms_norm(h) @ lw.w_up.T) @ lw.w_down.T
    return h, kv, _merge_heads(v), attn


def readout(model: Model, h: np.ndarray) -> np.ndarray:
    return rms_norm(h) @ model.readout.T


def forward_full(model: Model, seq: TokenSequence) -> ForwardResult:
    h = seq.embeddings
    pos = seq.position_ids
    caches, values, attns = [], [], []
    for layer in range(model.cfg.n_layers):
        h, kv, v, attn = block_forward(model, layer, h, pos)
        caches.append(kv)
        values.append(v)
        attns.append(attn)
    return ForwardResult(readout(model, h), KvCache(tuple(caches)), values, attns)


def decode_step(
    model: Model, cache: KvCache, new_embedding: np.ndarray, new_position: int
) -> tuple[np.ndarray, KvCache]:
    if cache.n_layers != model.cfg.n_layers:
        raise ValueError(f"cache has {cache.n_layers} layers, model has {model.cfg.n_layers}")
    newest = max(int(layer.position_ids.max()) for layer in cache.layers if layer.rows)
    if new_position <= newest:
        raise ValueError(f"new position {new_position} must exceed cached position {newest}")
    h = np.asarray(new_embedding, dtype=np.float64).reshape(1, model.cfg.hidden_dim)
    pos = np.asarray([new_position], dtype=np.int64)
    layers = []
    for layer in range(model.cfg.n_layers):
        h, kv, _, _ = block_forward(model, layer, h, pos, past=cache.layers[layer])
        layers.append(kv)
    return readout(model, h)[0], KvCache(tuple(layers))
