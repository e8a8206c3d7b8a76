"""Human-readable run reports: CSV tables and static SVG plots.

The SVG writer is self-contained so outputs are byte-identical across
runs with the same inputs; no display server or plotting backend is
involved.
"""
from __future__ import annotations

import csv
from pathlib import Path

_WIDTH, _HEIGHT = 640, 420
_MARGIN = 56
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def write_loss_history(history: list[dict], path) -> None:
    """loss_history.csv with header epoch,train_loss,val_loss."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for entry in history:
            writer.writerow([
                entry["epoch"],
                f"{entry['train_loss']:.6f}",
                "" if "val_loss" not in entry else f"{entry['val_loss']:.6f}",
            ])


def read_loss_history(path) -> list[dict]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            entry = {"epoch": int(row["epoch"]), "train_loss": float(row["train_loss"])}
            if row.get("val_loss"):
                entry["val_loss"] = float(row["val_loss"])
            out.append(entry)
    return out


def write_metrics_table(runs: dict[str, dict[str, float]], path) -> None:
    """One row per metric name, one column per run."""
    names = sorted({k for metrics in runs.values() for k in metrics})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + list(runs))
        for name in names:
            writer.writerow([name] + [
                "" if name not in runs[r] else f"{runs[r][name]:.6f}" for r in runs
            ])


def _scale(value: float, lo: float, hi: float, out_lo: float, out_hi: float) -> float:
    if hi == lo:
        return (out_lo + out_hi) / 2
    return out_lo + (value - lo) / (hi - lo) * (out_hi - out_lo)


def _polyline(xs, ys, x_range, y_range, color: str) -> str:
    points = " ".join(
        f"{_scale(x, *x_range, _MARGIN, _WIDTH - _MARGIN):.2f},"
        f"{_scale(y, *y_range, _HEIGHT - _MARGIN, _MARGIN):.2f}"
        for x, y in zip(xs, ys)
    )
    return f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{points}"/>'


def write_line_chart(path, series: dict[str, tuple[list[float], list[float]]],
                     title: str, x_label: str, y_label: str) -> None:
    """Minimal multi-series line chart as standalone SVG."""
    all_x = [x for xs, _ in series.values() for x in xs]
    all_y = [y for _, ys in series.values() for y in ys]
    if not all_x:
        raise ValueError("no data to plot")
    x_range = (min(all_x), max(all_x))
    y_range = (min(0.0, min(all_y)), max(1e-9, max(all_y)))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2:.0f}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{_MARGIN}" y1="{_HEIGHT - _MARGIN}" x2="{_WIDTH - _MARGIN}" '
        f'y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
        f'<line x1="{_MARGIN}" y1="{_MARGIN}" x2="{_MARGIN}" y2="{_HEIGHT - _MARGIN}" stroke="black"/>',
        f'<text x="{_WIDTH / 2:.0f}" y="{_HEIGHT - 12}" text-anchor="middle" font-size="12">{x_label}</text>',
        f'<text x="16" y="{_HEIGHT / 2:.0f}" font-size="12" '
        f'transform="rotate(-90 16 {_HEIGHT / 2:.0f})" text-anchor="middle">{y_label}</text>',
    ]
    for tick in range(5):
        y_val = y_range[0] + (y_range[1] - y_range[0]) * tick / 4
        y_px = _scale(y_val, *y_range, _HEIGHT - _MARGIN, _MARGIN)
        parts.append(f'<line x1="{_MARGIN - 4}" y1="{y_px:.2f}" x2="{_MARGIN}" y2="{y_px:.2f}" stroke="black"/>')
        parts.append(f'<text x="{_MARGIN - 8}" y="{y_px + 4:.2f}" text-anchor="end" font-size="10">{y_val:.2f}</text>')
        x_val = x_range[0] + (x_range[1] - x_range[0]) * tick / 4
        x_px = _scale(x_val, *x_range, _MARGIN, _WIDTH - _MARGIN)
        parts.append(f'<line x1="{x_px:.2f}" y1="{_HEIGHT - _MARGIN}" x2="{x_px:.2f}" '
                     f'y2="{_HEIGHT - _MARGIN + 4}" stroke="black"/>')
        parts.append(f'<text x="{x_px:.2f}" y="{_HEIGHT - _MARGIN + 16}" '
                     f'text-anchor="middle" font-size="10">{x_val:g}</text>')
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        parts.append(_polyline(xs, ys, x_range, y_range, color))
        parts.append(f'<rect x="{_WIDTH - _MARGIN - 150}" y="{_MARGIN + 18 * i}" '
                     f'width="12" height="12" fill="{color}"/>')
        parts.append(f'<text x="{_WIDTH - _MARGIN - 132}" y="{_MARGIN + 18 * i + 10}" '
                     f'font-size="11">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def write_topk_curve(runs: dict[str, dict[str, float]], path) -> None:
    """Accuracy-vs-k curve, one line per metrics file."""
    series = {}
    for name, metrics in runs.items():
        ks, accs = [], []
        for key, value in sorted(metrics.items()):
            if key.startswith("topk.acc@"):
                ks.append(int(key.split("@")[1].split(".")[0]))
                accs.append(value)
        if ks:
            order = sorted(range(len(ks)), key=lambda i: ks[i])
            series[name] = ([float(ks[i]) for i in order], [accs[i] for i in order])
    if not series:
        raise ValueError("no top-k metrics found in the supplied runs")
    write_line_chart(path, series, "Retrieval accuracy at k", "k", "accuracy")
