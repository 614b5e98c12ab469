"""Command-line entry point: run, report, gradcheck, ablate, genstream."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, config_hash, dump_config, load_config
from .metrics import CSV_FIELDS, metrics_record, summary, write_csv, write_json
from .tasks import StreamConfig, export_csv, gen_task_stream
from .trainer import (
    ABLATION_ROWS,
    DivergenceError,
    SequenceResult,
    gradcheck_setup,
    gradient_report,
    train_sequence,
)

log = logging.getLogger("datacl")

EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 1, 2, 3
GRAD_TOL = 1e-4
THREADS_ENV = "DATA_CL_THREADS"


def threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV}: must be >= 1, got {n}")
    return n


def _configs(args) -> tuple[RunConfig, StreamConfig]:
    cfg, stream = load_config(args.config)
    if args.seed is not None:
        cfg, stream = replace(cfg, seed=args.seed), replace(stream, seed=args.seed)
    return cfg, stream


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_step_log(rows, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "task", "loss", "ortho_loss", "restored_count"])
        for r in rows:
            w.writerow([r.step, r.task, repr(r.loss), repr(r.ortho), r.restored])


def run_record(result: SequenceResult, cfg: RunConfig, stream_cfg: StreamConfig, order) -> dict:
    extra = {"config_hash": config_hash(cfg, stream_cfg)}
    if result.static_matrix is not None:
        extra["static"] = summary(result.static_matrix)
    return metrics_record(result.matrix, cfg.method, order, cfg.seed, **extra)


# -- run -------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg, stream_cfg = _configs(args)
    digest = config_hash(cfg, stream_cfg)
    out = _out_dir(args, f"runs/{cfg.method}-s{cfg.seed}")
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(exist_ok=True)
    stream = gen_task_stream(stream_cfg)

    resume, start = None, 0
    if args.resume:
        ck = checkpoint.load(args.resume)
        if ck.config_hash != digest:
            log.error("checkpoint config hash %s does not match config %s; refusing to resume", ck.config_hash, digest)
            return EXIT_CONFIG
        resume, start = checkpoint.unpack_result(ck, cfg), ck.task_index + 1
        log.info("resuming after task position %d (step %d)", ck.task_index, ck.step)

    def on_task_end(m: int, result: SequenceResult) -> None:
        checkpoint.save(checkpoint.pack_result(result, digest, m), ck_dir / f"task{m}.ckpt")
        log.info("task position %d done: step %d", m, result.step)

    try:
        result = train_sequence(stream, cfg, on_task_end, resume, start)
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    (out / "config.txt").write_text(dump_config(cfg, stream_cfg))
    rec = run_record(result, cfg, stream_cfg, stream.order)
    write_json(rec, out / "metrics.json")
    write_csv([rec], out / "metrics.csv")
    write_step_log(result.log, out / "steps.csv")
    print(f"{cfg.method} seed {cfg.seed}: FP {rec['fp']:.2f} AP {rec['ap']:.2f} Forget {rec['forget']:.2f}")
    return 0


# -- report ----------------------------------------------------------------

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def accuracy_svg(rec: dict, title: str) -> str:
    """Per-task accuracy against tasks completed, with FP/Forget overlay."""
    a = np.array([[np.nan if v is None else v for v in row] for row in rec["matrix"]], dtype=float)
    n = a.shape[0]
    W, H, L, R, T, B = 480, 320, 50, 130, 40, 40
    pw, ph = W - L - R, H - T - B

    def px(m):
        return L + (pw * m / (n - 1) if n > 1 else pw / 2)

    def py(v):
        return T + ph * (1 - v / 100.0)

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<line x1="{L}" y1="{T + ph}" x2="{L + pw}" y2="{T + ph}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{T + ph}" stroke="black"/>',
    ]
    for v in (0, 25, 50, 75, 100):
        parts.append(f'<text x="{L - 6}" y="{py(v) + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                     f'font-size="10">{v}</text>')
    for m in range(n):
        parts.append(f'<text x="{px(m):.1f}" y="{T + ph + 14}" text-anchor="middle" font-family="sans-serif" '
                     f'font-size="10">{m + 1}</text>')
    parts.append(f'<text x="{L + pw / 2:.1f}" y="{H - 6}" text-anchor="middle" font-family="sans-serif" '
                 f'font-size="11">tasks completed</text>')
    for q in range(n):
        pts = [(px(m), py(a[q, m])) for m in range(q, n) if not np.isnan(a[q, m])]
        color = COLORS[q % len(COLORS)]
        if len(pts) > 1:
            coords = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
            parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="2.5" fill="{color}"/>')
        parts.append(f'<text x="{L + pw + 10}" y="{T + 12 + 14 * q}" font-family="sans-serif" font-size="10" '
                     f'fill="{color}">task {q + 1}</text>')
    fp_y = py(rec["fp"])
    parts.append(f'<line x1="{L}" y1="{fp_y:.1f}" x2="{L + pw}" y2="{fp_y:.1f}" stroke="gray" '
                 f'stroke-dasharray="4,3"/>')
    parts.append(f'<text x="{L + pw + 10}" y="{T + 12 + 14 * n + 10}" font-family="sans-serif" font-size="10">'
                 f'FP {rec["fp"]:.1f}</text>')
    parts.append(f'<text x="{L + pw + 10}" y="{T + 12 + 14 * n + 24}" font-family="sans-serif" font-size="10">'
                 f'Forget {rec["forget"]:.1f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(args) -> int:
    root = Path(args.results)
    found = sorted(root.rglob("metrics.json")) if root.is_dir() else []
    runs = []
    for path in found:
        rec = json.loads(path.read_text())
        if "matrix" in rec:
            runs.append((path.parent.relative_to(root), rec))
    if not runs:
        log.error("no completed runs under %s", root)
        return EXIT_FAIL
    runs.sort(key=lambda r: (r[1]["method"], r[1]["seed"], str(r[0])))
    out = _out_dir(args, str(root))
    write_csv([rec for _, rec in runs], out / "summary.csv")
    lines = [f"{'method':<12} {'seed':>4} {'FP':>7} {'AP':>7} {'Forget':>7}"]
    for _, rec in runs:
        lines.append(f"{rec['method']:<12} {rec['seed']:>4} {rec['fp']:7.2f} {rec['ap']:7.2f} {rec['forget']:7.2f}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    charts = out / "charts"
    charts.mkdir(exist_ok=True)
    for rel, rec in runs:
        stem = "_".join(rel.parts) or f"{rec['method']}-s{rec['seed']}"
        (charts / f"{stem}.svg").write_text(accuracy_svg(rec, f"{rec['method']} (seed {rec['seed']})"))
    return 0


# -- gradcheck -------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    cfg, stream_cfg = _configs(args)
    if stream_cfg.d_in > 16 or cfg.hidden > 16:
        raise ConfigError(f"gradcheck needs a small model: stream.d_in and hidden must be <= 16, "
                          f"got {stream_cfg.d_in} and {cfg.hidden}")
    stream = gen_task_stream(replace(stream_cfg, n_train=max(stream_cfg.n_train, 8)))
    state, X, y, tids = gradcheck_setup(stream, cfg)
    perturb = {args.corrupt: 1.0} if args.corrupt else None
    report = gradient_report(state, cfg, X, y, tids, perturb=perturb)
    failed = []
    for name, err in report.items():
        if err is None:
            print(f"{name:<12} skipped")
            continue
        ok = err <= GRAD_TOL
        print(f"{name:<12} {err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        print("gradient check failed for: " + ", ".join(failed))
        return EXIT_FAIL
    return 0


# -- ablate ----------------------------------------------------------------


def _ablation_row(job):
    row, stream_cfg, cfg = job
    result = train_sequence(gen_task_stream(stream_cfg), replace(cfg, method="data", **ABLATION_ROWS[row]))
    return row, result.matrix.a


def cmd_ablate(args) -> int:
    cfg, stream_cfg = _configs(args)
    workers = threads()
    rows = args.rows.split(",") if args.rows else list(ABLATION_ROWS)
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"unknown ablation rows: {', '.join(unknown)}")
    out = _out_dir(args, f"runs/ablate-s{cfg.seed}")
    jobs = [(r, stream_cfg, cfg) for r in rows]
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                done = list(pool.map(_ablation_row, jobs))
        else:
            done = [_ablation_row(j) for j in jobs]
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    order = gen_task_stream(stream_cfg).order
    records = []
    for row, a in done:
        rec = metrics_record(a, "data", order, cfg.seed, row=row, **ABLATION_ROWS[row])
        records.append(rec)
        print(f"{row}: FP {rec['fp']:.2f} AP {rec['ap']:.2f} Forget {rec['forget']:.2f}")
    write_json({"rows": records}, out / "ablation.json")
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("row",) + CSV_FIELDS[2:])
        for r in records:
            w.writerow([r["row"], r["seed"], f"{r['fp']:.4f}", f"{r['ap']:.4f}", f"{r['forget']:.4f}"])
    return 0


# -- genstream -------------------------------------------------------------


def cmd_genstream(args) -> int:
    _, stream_cfg = _configs(args)
    out = _out_dir(args, "stream")
    path = export_csv(gen_task_stream(stream_cfg), out / "stream.csv")
    print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="datacl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="key = value config file")
            sp.add_argument("--seed", type=int, default=None, help="override run and stream seed")
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("run", help="train one method over a task stream")
    common(sp)
    sp.add_argument("--resume", default=None, help="checkpoint to continue from")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("report", help="summarize run directories and draw charts")
    sp.add_argument("results", help="directory containing run outputs")
    common(sp, config=False)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    common(sp)
    sp.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="run the ablation rows E1..E8")
    common(sp)
    sp.add_argument("--rows", default=None, help="comma-separated subset, e.g. E2,E4")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("genstream", help="export the synthetic task stream as CSV")
    common(sp)
    sp.set_defaults(func=cmd_genstream)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
