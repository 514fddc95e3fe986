"""Command-line front end: ``ivc-prune {scores,select,simulate,patterns,bench}``.

A JSON config file supplies defaults; command-line flags override it. Errors
exit nonzero with a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ivc_prune.bench_harness import SweepEntry, run_sweep, write_report_csv
from ivc_prune.layout import GridLayout
from ivc_prune.patterns import PATTERN_KINDS, PatternSpec, generate_pattern
from ivc_prune.prune_engine import PruneConfig, run_with_pruning
from ivc_prune.rope_core import RopeConfig, score_table
from ivc_prune.selection import SelectionConfig, ivc_select, select_tokens
from ivc_prune.toy_model import ModelConfig, block_forward, init_model, make_sequence

log = logging.getLogger("ivc_prune")

THREADS_ENV = "IVC_PRUNE_THREADS"


class CliError(Exception):
    def __init__(self, kind: str, message: str, **extra: Any) -> None:
        super().__init__(message)
        self.kind = kind
        self.extra = extra


@dataclass
class CliConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    text_len: int = 8
    visual_len: int = 64
    layout: GridLayout | None = None
    visual_offset: int | None = None
    prune: PruneConfig = field(default_factory=PruneConfig)
    bench: list[dict] = field(default_factory=list)
    verbosity: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "CliConfig":
        seq = data.get("sequence", {})
        layout = seq.get("layout")
        return cls(
            model=ModelConfig.from_dict(data.get("model", {})),
            text_len=int(seq.get("text_len", 8)),
            visual_len=int(seq.get("visual_len", 64)),
            layout=GridLayout.from_dict(layout) if layout else None,
            visual_offset=seq.get("visual_offset"),
            prune=PruneConfig.from_dict(data.get("prune", {})),
            bench=list(data.get("bench", {}).get("configs", [])),
            verbosity=int(data.get("verbosity", 0)),
        )


def load_config(path: str | None) -> CliConfig:
    if path is None:
        return CliConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError("io_error", f"cannot read config {path}: {exc.strerror}", path=path) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError("parse_error", f"{path}: {exc.msg}", path=path, offset=exc.pos) from exc
    try:
        return CliConfig.from_dict(data)
    except (TypeError, ValueError, KeyError) as exc:
        raise CliError("config_error", f"{path}: {exc}", path=path) from exc


def _layout_from_args(args, cfg: CliConfig) -> GridLayout | None:
    if getattr(args, "height", None) and getattr(args, "width", None):
        return GridLayout(args.height, args.width, line_separators=getattr(args, "separators", False))
    return cfg.layout


def _shape(args, cfg: CliConfig, layout: GridLayout | None) -> tuple[int, int]:
    text_len = args.text_len if getattr(args, "text_len", None) is not None else cfg.text_len
    visual_len = getattr(args, "visual_len", None) or cfg.visual_len
    if layout is not None:
        visual_len = layout.n_tokens
    return text_len, visual_len


def _selection_cfg(args, cfg: CliConfig) -> SelectionConfig:
    sel = cfg.prune.selection
    updates = {}
    for name in ("k_c", "k_f", "seed_fraction", "selection_layer"):
        val = getattr(args, name, None)
        if val is not None:
            updates[name] = val
    if getattr(args, "protected_layers", None) is not None:
        updates["protected_layers"] = frozenset(args.protected_layers)
    return SelectionConfig.from_dict({**sel.to_dict(), **updates})


def _open_out(path: str | None):
    if path is None or path == "-":
        return sys.stdout, False
    try:
        return open(path, "w", encoding="utf-8", newline=""), True
    except OSError as exc:
        raise CliError("io_error", f"cannot write {path}: {exc.strerror}", path=path) from exc


def _emit(text: str, path: str | None) -> None:
    fh, close = _open_out(path)
    try:
        fh.write(text)
    finally:
        if close:
            fh.close()


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def cmd_scores(args, cfg: CliConfig) -> None:
    layout = _layout_from_args(args, cfg)
    n = args.n if args.n is not None else (layout.n_tokens if layout else cfg.visual_len)
    if n < 1:
        raise CliError("usage_error", f"n must be >= 1, got {n}")
    if layout is not None and layout.n_tokens != n:
        raise CliError("usage_error", f"layout has {layout.n_tokens} tokens but n={n}")
    rope = RopeConfig(cfg.model.head_dim, cfg.model.rope_base)
    table = score_table(n, rope, layout)
    k_c = _selection_cfg(args, cfg).k_c
    ivc = set(int(i) for i in ivc_select(table, k_c, layout))
    coords = layout.coords if layout else None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["position", "row", "col", "v_score", "u_score", "is_ivc"])
    for m in range(n):
        row, col = (int(coords[m][0]), int(coords[m][1])) if coords is not None else (0, m)
        writer.writerow(
            [m, row, col, _fmt(table.v_scores[m]), _fmt(table.u_scores[m]), str(m in ivc).lower()]
        )
    _emit(buf.getvalue(), args.out)


def read_value_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Load ``{"v_text": [[...]], "v_img": [[...]]}`` value matrices."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CliError("io_error", f"cannot read {path}: {exc.strerror}", path=path) from exc
    try:
        text = raw.decode("utf-8")
        data = json.loads(text)
    except UnicodeDecodeError as exc:
        raise CliError("parse_error", f"{path}: invalid UTF-8", path=path, offset=exc.start) from exc
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CliError("parse_error", f"{path}: {exc.msg}", path=path, offset=offset) from exc
    try:
        v_text = np.asarray(data["v_text"], dtype=np.float64)
        v_img = np.asarray(data["v_img"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError("parse_error", f"{path}: expected v_text and v_img matrices ({exc})", path=path) from exc
    if v_text.ndim != 2 or v_img.ndim != 2 or v_text.shape[1] != v_img.shape[1]:
        raise CliError("parse_error", f"{path}: v_text {v_text.shape} and v_img {v_img.shape} must share width")
    return v_text, v_img


def synthetic_values(
    cfg: CliConfig, sel: SelectionConfig, seed: int, text_len: int, visual_len: int
) -> tuple[np.ndarray, np.ndarray]:
    """Values at the selection layer of the toy model on a seeded sequence."""
    model = init_model(cfg.model)
    if sel.selection_layer >= cfg.model.n_layers:
        raise CliError("config_error", f"selection layer {sel.selection_layer} >= n_layers {cfg.model.n_layers}")
    seq = make_sequence(text_len, visual_len, cfg.model.hidden_dim, seed, cfg.visual_offset)
    h = seq.embeddings
    for layer in range(sel.selection_layer + 1):
        h, _, v, _ = block_forward(model, layer, h, seq.position_ids)
    return v[seq.text_rows], v[seq.visual_rows]


def cmd_select(args, cfg: CliConfig) -> None:
    sel = _selection_cfg(args, cfg)
    layout = _layout_from_args(args, cfg)
    if args.input:
        v_text, v_img = read_value_file(args.input)
    else:
        v_text, v_img = synthetic_values(cfg, sel, args.seed, *_shape(args, cfg, layout))
    rope = RopeConfig(cfg.model.head_dim, cfg.model.rope_base)
    result = select_tokens(v_text, v_img, score_table(len(v_img), rope, layout), sel, layout)
    _emit(json.dumps(result.to_dict()) + "\n", args.out)


def cmd_simulate(args, cfg: CliConfig) -> None:
    sel = _selection_cfg(args, cfg)
    prune = PruneConfig(sel, cfg.prune.bytes_per_element)
    layout = _layout_from_args(args, cfg)
    text_len, visual_len = _shape(args, cfg, layout)
    model = init_model(cfg.model)
    seq = make_sequence(text_len, visual_len, cfg.model.hidden_dim, args.seed, cfg.visual_offset)
    run = run_with_pruning(model, seq, prune, layout)
    stats = run.stats.to_dict()
    stats["selection"] = run.selection.to_dict()
    _emit(json.dumps(stats) + "\n", args.out)


def cmd_patterns(args, cfg: CliConfig) -> None:
    layout = _layout_from_args(args, cfg) or GridLayout(8, 8)
    rope = RopeConfig(cfg.model.head_dim, cfg.model.rope_base)
    kinds = args.kind or list(PATTERN_KINDS)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "row", "col", "kind", "retained"])
    for kind in kinds:
        spec = PatternSpec(kind, ratio=args.ratio, rng_seed=args.seed)
        kept = set(int(i) for i in generate_pattern(spec, layout, rope))
        for idx, (r, c) in enumerate(layout.coords):
            writer.writerow([idx, int(r), int(c), kind, str(idx in kept).lower()])
    _emit(buf.getvalue(), args.out)


def _default_bench(cfg: CliConfig) -> list[dict]:
    return [
        {"config_id": "baseline", "mode": "baseline"},
        {"config_id": "ivc_prune", "mode": "prune"},
    ]


def cmd_bench(args, cfg: CliConfig) -> None:
    rows = cfg.bench or _default_bench(cfg)
    base = {
        "model": cfg.model.to_dict(),
        "text_len": cfg.text_len,
        "visual_len": cfg.visual_len,
        "prune": cfg.prune.to_dict(),
        "seq_seed": args.seed,
    }
    if cfg.layout is not None:
        base["layout"] = cfg.layout.to_dict()
    try:
        entries = [SweepEntry.from_dict({**base, **row}) for row in rows]
    except (TypeError, ValueError) as exc:
        raise CliError("config_error", f"bad bench row: {exc}") from exc
    if args.timing:
        entries = [
            SweepEntry(**{**e.__dict__, "timing": True, "repetitions": max(e.repetitions, args.repetitions)})
            for e in entries
        ]
    reports = run_sweep(entries, threads=args.threads)
    buf = io.StringIO()
    write_report_csv(reports, buf)
    _emit(buf.getvalue(), args.out)
    for rep in reports:
        if rep.error:
            log.warning("%s: %s", rep.config_id, rep.error)


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError("usage_error", f"{THREADS_ENV} must be an integer, got {env!r}")
    return 1


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies suppress defaults so flags given before the subcommand survive
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="JSON config file")
    common.add_argument("--seed", type=int, default=d(0), help="seed for synthetic inputs")
    common.add_argument("--out", default=d(None), help="output path (default stdout)")
    common.add_argument("--threads", type=int, default=d(None), help=f"worker threads (env {THREADS_ENV})")
    common.add_argument("-v", "--verbose", action="count", default=d(0))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)

    budgets = argparse.ArgumentParser(add_help=False)
    budgets.add_argument("--k-c", dest="k_c", type=float)
    budgets.add_argument("--k-f", dest="k_f", type=float)
    budgets.add_argument("--seed-fraction", dest="seed_fraction", type=float)
    budgets.add_argument("--selection-layer", dest="selection_layer", type=int)
    budgets.add_argument("--protected-layers", dest="protected_layers", type=int, nargs="*")

    shape = argparse.ArgumentParser(add_help=False)
    shape.add_argument("--text-len", dest="text_len", type=int)
    shape.add_argument("--visual-len", dest="visual_len", type=int)

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--height", type=int)
    grid.add_argument("--width", type=int)
    grid.add_argument("--separators", action="store_true", help="append a protected separator per line")

    parser = argparse.ArgumentParser(
        prog="ivc-prune", description=__doc__.splitlines()[0], parents=[_global_flags(suppress=False)]
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scores", parents=[common, budgets, grid], help="per-position V/U scores as CSV")
    p.add_argument("--n", type=int, help="number of visual positions")
    p.set_defaults(func=cmd_scores)

    p = sub.add_parser("select", parents=[common, budgets, grid, shape], help="token selection as JSON")
    p.add_argument("--input", help="JSON file with v_text and v_img value matrices")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", parents=[common, budgets, grid, shape], help="pruned prefill stats as JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("patterns", parents=[common, grid], help="alternative pattern masks as CSV")
    p.add_argument("--kind", choices=PATTERN_KINDS, action="append")
    p.add_argument("--ratio", type=float, default=0.15)
    p.set_defaults(func=cmd_patterns)

    p = sub.add_parser("bench", parents=[common], help="efficiency sweep as CSV")
    p.add_argument("--timing", action="store_true", help="measure wall-clock prefill/decode")
    p.add_argument("--repetitions", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.threads = _resolve_threads(args.threads)
        cfg = load_config(args.config)
        level = logging.WARNING - 10 * max(args.verbose, cfg.verbosity)
        logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
        args.func(args, cfg)
    except CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc), **exc.extra}), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(json.dumps({"error": "invalid_input", "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
