"""Markdown tables and static SVG plots from saved metric reports."""
from __future__ import annotations

import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

TASK_COLUMNS = ("hr", "spo2", "rr")
METRICS = ("mae", "rmse", "pearson")


def _fmt(v):
    return "n/a" if v is None else f"{v:.3f}"


def load_reports(run_dir) -> list:
    """``(label, report dict, stem)`` for every ``report_*.json`` in a run directory."""
    run_dir = Path(run_dir)
    paths = sorted(run_dir.glob("report_*.json"))
    if not paths:
        raise FileNotFoundError(f"no report_*.json files in {run_dir}")
    out = []
    for p in paths:
        doc = json.loads(p.read_text())
        cfg = doc.get("config", {})
        if "held_out" in cfg:
            label = cfg["held_out"]
        elif "fold" in cfg:
            label = f"fold {cfg['fold']}"
        else:
            label = p.stem[len("report_"):]
        out.append((label, doc, p.stem))
    return out


def markdown_table(rows) -> str:
    """One row per ``(label, report dict)`` with MAE/RMSE/Pearson for each scalar task."""
    head = ["target"] + [f"{t.upper()} {m}" for t in TASK_COLUMNS for m in METRICS] + ["BVP r"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for label, doc in rows:
        cells = [str(label)]
        for t in TASK_COLUMNS:
            task = doc["tasks"].get(t, {})
            cells += [_fmt(task.get(m)) if task.get("n") else "n/a" for m in METRICS]
        cells.append(_fmt(doc.get("bvp_pearson")))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def svg_traces(series: dict, title: str = "", width=640, height=240, fs: float = 30.0) -> str:
    """Line plot of equally long signals; ``series`` maps legend name to samples."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    arrays = {k: np.asarray(v, np.float64) for k, v in series.items()}
    lengths = {a.size for a in arrays.values()}
    if len(lengths) != 1:
        raise ValueError("all traces must have the same length")
    n = lengths.pop()
    lo = min(float(a.min()) for a in arrays.values())
    hi = max(float(a.max()) for a in arrays.values())
    span = hi - lo if hi > lo else 1.0
    pad = 30
    xs = pad + np.arange(n) * (width - 2 * pad) / max(n - 1, 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="18" font-family="sans-serif" font-size="13">{escape(title)}</text>',
             f'<text x="{width - pad}" y="{height - 8}" font-family="sans-serif" font-size="11" '
             f'text-anchor="end">{n / fs:.1f} s</text>']
    for k, (name, a) in enumerate(arrays.items()):
        ys = height - pad - (a - lo) / span * (height - 2 * pad)
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
        color = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.3" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{18 + 14 * k}" fill="{color}" font-family="sans-serif" '
                     f'font-size="11" text-anchor="end">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bvp_plot(npz_path, title, fs=30.0):
    """SVG of the first BVP-labelled window in a saved ``*_bvp.npz``; ``None`` if none is labelled."""
    with np.load(npz_path) as z:
        idx = np.flatnonzero(z["has_label"])
        if idx.size == 0:
            return None
        i = int(idx[0])
        return svg_traces({"predicted": z["predicted"][i], "ground truth": z["label"][i]}, title, fs=fs)


def render_run(run_dir, svg: bool = False) -> tuple:
    """Write ``report.md`` (and ``bvp_<stem>.svg`` files) into ``run_dir``; return the
    Markdown text and the written paths."""
    run_dir = Path(run_dir)
    reports = load_reports(run_dir)
    text = markdown_table([(label, doc) for label, doc, _ in reports])
    written = [run_dir / "report.md"]
    written[0].write_text(text)
    if svg:
        for label, _, stem in reports:
            npz = run_dir / f"{stem}_bvp.npz"
            if not npz.exists():
                continue
            plot = bvp_plot(npz, f"BVP, {label}")
            if plot is not None:
                out = run_dir / f"bvp_{stem[len('report_'):] or stem}.svg"
                out.write_text(plot)
                written.append(out)
    return text, written
