"""Desk-scale efficiency sweeps and selection ablations on the toy model.

MAC and byte columns are analytic and reproducible; wall-clock columns are
machine dependent and only advisory.
"""

from __future__ import annotations

import csv
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from ivc_prune.layout import GridLayout
from ivc_prune.patterns import PatternSpec, generate_pattern, pattern_union_with_foreground
from ivc_prune.prune_engine import PruneConfig, PruneRun, run_with_pruning, stats_from_rows
from ivc_prune.rope_core import ScoreTable
from ivc_prune.selection import (
    SelectionConfig,
    SelectionResult,
    foreground_size,
    select_tokens,
    semantic_seed,
    topk_indices,
)
from ivc_prune.toy_model import (
    Model,
    ModelConfig,
    TokenSequence,
    block_forward,
    decode_step,
    forward_full,
    init_model,
    make_sequence,
    project_qkv,
    softmax,
)

log = logging.getLogger(__name__)

__all__ = [
    "SweepEntry",
    "RunReport",
    "REPORT_COLUMNS",
    "run_sweep",
    "write_report_csv",
    "stage_ablation",
    "ivc_ablation",
    "text_image_attention_logits",
]

REPORT_COLUMNS = (
    "config_id",
    "avg_tokens_pct",
    "kv_bytes_before",
    "kv_bytes_after",
    "reduction",
    "prefill_macs",
    "decode_macs_per_token",
    "prefill_ms",
    "decode_ms_per_token",
)

MODES = ("baseline", "prune", "pattern")


@dataclass(frozen=True)
class SweepEntry:
    config_id: str
    model: ModelConfig = ModelConfig()
    text_len: int = 8
    visual_len: int = 64
    layout: GridLayout | None = None
    prune: PruneConfig = PruneConfig()
    pattern: PatternSpec | None = None
    mode: str = "prune"
    repetitions: int = 1
    timing: bool = False
    seq_seed: int = 0
    decode_steps: int = 4

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.layout is not None and self.layout.n_tokens != self.visual_len:
            raise ValueError(
                f"{self.config_id}: layout has {self.layout.n_tokens} tokens, visual_len={self.visual_len}"
            )
        if self.mode == "pattern" and self.pattern is None:
            raise ValueError(f"{self.config_id}: pattern mode needs a pattern spec")

    @classmethod
    def from_dict(cls, data: dict) -> "SweepEntry":
        data = dict(data)
        if "model" in data:
            data["model"] = ModelConfig.from_dict(data["model"])
        if data.get("layout"):
            data["layout"] = GridLayout.from_dict(data["layout"])
        if "prune" in data:
            data["prune"] = PruneConfig.from_dict(data["prune"])
        if data.get("pattern"):
            data["pattern"] = PatternSpec.from_dict(data["pattern"])
            data.setdefault("mode", "pattern")
        return cls(**data)


@dataclass
class RunReport:
    config_id: str
    avg_tokens_pct: float = float("nan")
    kv_bytes_before: int = 0
    kv_bytes_after: int = 0
    reduction: float = float("nan")
    prefill_macs: int = 0
    decode_macs_per_token: int = 0
    prefill_ms: float = float("nan")
    decode_ms_per_token: float = float("nan")
    selected: int = 0
    ivc: int = 0
    foreground: int = 0
    error: str | None = None
    timing_samples: list[tuple[float, float]] = field(default_factory=list)

    def csv_row(self) -> list[str]:
        if self.error is not None:
            return [self.config_id] + [""] * (len(REPORT_COLUMNS) - 1)

        def ms(x: float) -> str:
            return "" if np.isnan(x) else f"{x:.4f}"

        return [
            self.config_id,
            f"{self.avg_tokens_pct:.12g}",
            str(self.kv_bytes_before),
            str(self.kv_bytes_after),
            f"{self.reduction:.12g}",
            str(self.prefill_macs),
            str(self.decode_macs_per_token),
            ms(self.prefill_ms),
            ms(self.decode_ms_per_token),
        ]


def _pattern_selector(spec: PatternSpec, cfg: SelectionConfig, layout: GridLayout | None, rope):
    def select(v_text, v_img, table: ScoreTable, visual_pos):
        base = select_tokens(v_text, v_img, table, cfg, layout, position_ids=visual_pos)
        grid = layout or GridLayout(1, len(v_img))
        pattern = generate_pattern(spec, grid, rope)
        selected = pattern_union_with_foreground(pattern, base.foreground)
        return replace(
            base,
            ivc=tuple(int(i) for i in pattern),
            selected=tuple(int(i) for i in selected),
            position_ids=tuple(int(visual_pos[i]) for i in selected),
        )

    return select


def _run_once(entry: SweepEntry, model: Model, seq: TokenSequence) -> tuple[RunReport, float, float]:
    t0 = time.perf_counter()
    if entry.mode == "baseline":
        res = forward_full(model, seq)
        cache = res.cache
        rows = cache.row_counts()
        stats = stats_from_rows(
            rows, rows, model.cfg.n_heads, model.cfg.head_dim, model.cfg.n_layers - 1,
            entry.prune.bytes_per_element, model.cfg.readout_dim,
        )
        stats = replace(stats, avg_tokens_pct=100.0)
        sizes = (seq.visual_len, 0, 0)
    else:
        selector = None
        if entry.mode == "pattern":
            selector = _pattern_selector(entry.pattern, entry.prune.selection, entry.layout, model.cfg.rope)
        run: PruneRun = run_with_pruning(model, seq, entry.prune, entry.layout, selector)
        cache, stats = run.cache, run.stats
        sizes = (len(run.selection.selected), len(run.selection.ivc), len(run.selection.foreground))
    prefill_s = time.perf_counter() - t0

    rng = np.random.default_rng(entry.seq_seed + 1)
    next_pos = int(seq.position_ids[-1]) + 1
    t1 = time.perf_counter()
    for step in range(entry.decode_steps):
        _, cache = decode_step(model, cache, rng.standard_normal(model.cfg.hidden_dim), next_pos + step)
    decode_s = (time.perf_counter() - t1) / max(entry.decode_steps, 1)

    report = RunReport(
        config_id=entry.config_id,
        avg_tokens_pct=float(stats.avg_tokens_pct),
        kv_bytes_before=stats.kv_bytes_before,
        kv_bytes_after=stats.kv_bytes_after,
        reduction=stats.reduction,
        prefill_macs=stats.prefill_macs,
        decode_macs_per_token=stats.decode_macs_per_token,
        selected=sizes[0],
        ivc=sizes[1],
        foreground=sizes[2],
    )
    return report, prefill_s * 1e3, decode_s * 1e3


def _run_entry(entry: SweepEntry) -> RunReport:
    try:
        model = init_model(entry.model)
        seq = make_sequence(entry.text_len, entry.visual_len, entry.model.hidden_dim, entry.seq_seed)
        if entry.timing:
            _run_once(entry, model, seq)  # warmup, discarded
        report, samples = None, []
        for _ in range(entry.repetitions):
            rep, prefill_ms, decode_ms = _run_once(entry, model, seq)
            if report is not None and (
                rep.prefill_macs != report.prefill_macs
                or rep.decode_macs_per_token != report.decode_macs_per_token
                or rep.kv_bytes_after != report.kv_bytes_after
            ):
                raise RuntimeError("analytic counts changed between repetitions")
            report = rep
            samples.append((prefill_ms, decode_ms))
        report.timing_samples = samples
        if entry.timing:
            report.prefill_ms = statistics.median(s[0] for s in samples)
            report.decode_ms_per_token = statistics.median(s[1] for s in samples)
        return report
    except Exception as exc:  # one bad row must not sink the sweep
        log.warning("sweep row %s failed: %s", entry.config_id, exc)
        return RunReport(config_id=entry.config_id, error=f"{type(exc).__name__}: {exc}")


def run_sweep(entries: Sequence[SweepEntry], threads: int = 1) -> list[RunReport]:
    """Execute every sweep row; results keep the input order."""
    if threads <= 1:
        return [_run_entry(e) for e in entries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_entry, entries))


def write_report_csv(reports: Sequence[RunReport], dest: str | Path | TextIO) -> None:
    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            write_report_csv(reports, fh)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for rep in reports:
        writer.writerow(rep.csv_row())


def text_image_attention_logits(model: Model, seq: TokenSequence, layer: int) -> np.ndarray:
    """RoPE-rotated text-query / image-key logits ``(H, L, N)`` at ``layer``'s input."""
    h = seq.embeddings
    for l in range(layer):
        h, _, _, _ = block_forward(model, l, h, seq.position_ids)
    q, k, _ = project_qkv(model, layer, h, seq.position_ids)
    q_txt = q[:, seq.text_rows]
    k_img = k[:, seq.visual_rows]
    return np.einsum("hld,hnd->hln", q_txt, k_img) / np.sqrt(q.shape[-1])


def stage_ablation(
    v_text: np.ndarray,
    v_img: np.ndarray,
    table: ScoreTable,
    cfg: SelectionConfig,
    attention_logits: np.ndarray | None = None,
    layout: GridLayout | None = None,
) -> dict[str, SelectionResult]:
    """Stage-1 only, full two-stage, and text-image attention foreground variants.

    Every variant keeps the same IVC tokens. The attention variant needs
    ``attention_logits`` of shape ``(L, N)`` or ``(H, L, N)``; it is skipped when absent.
    """
    n = np.asarray(v_img).shape[0]
    full = select_tokens(v_text, v_img, table, cfg, layout)
    ivc = np.asarray(full.ivc, dtype=np.int64)
    budget = foreground_size(n, cfg.k_f)

    def variant(scores: np.ndarray, seed: tuple[int, ...]) -> SelectionResult:
        fg = topk_indices(scores, budget)
        selected = np.union1d(ivc, fg)
        return replace(
            full,
            seed=seed,
            foreground=tuple(int(i) for i in fg),
            selected=tuple(int(i) for i in selected),
            position_ids=tuple(int(i) for i in selected),
        )

    s, seed = semantic_seed(v_text, v_img, cfg.seed_fraction)
    out = {"stage1": variant(s, tuple(int(i) for i in seed)), "stage1+2": full}
    if attention_logits is not None:
        logits = np.asarray(attention_logits, dtype=np.float64)
        if logits.ndim == 2:
            logits = logits[None]
        if logits.shape[-1] != n:
            raise ValueError(f"attention logits cover {logits.shape[-1]} image tokens, expected {n}")
        attn_scores = softmax(logits, axis=-1).mean(axis=(0, 1))
        out["text_image_attention"] = variant(attn_scores, ())
    return out


def ivc_ablation(base: SelectionResult, mode: str) -> SelectionResult:
    if mode == "with_ivc":
        return base
    if mode != "without_ivc":
        raise ValueError(f"mode must be 'with_ivc' or 'without_ivc', got {mode!r}")
    drop = set(base.ivc) - set(base.foreground)
    keep = [(i, p) for i, p in zip(base.selected, base.position_ids) if i not in drop]
    return replace(
        base,
        selected=tuple(i for i, _ in keep),
        position_ids=tuple(p for _, p in keep),
    )
