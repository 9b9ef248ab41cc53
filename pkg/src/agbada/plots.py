"""Standalone SVG documents for training curves, class balance and the
confusion matrix.

Hand-written SVG keeps the output dependency-free and machine-checkable:
every data mark carries ``data-*`` attributes with the value it draws.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .errors import ValidationError
from .evaluation import ConfusionMatrix
from .train import EpochRecord

WIDTH, HEIGHT, MARGIN = 480, 320, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e")


def _doc(body: list[str], title: str, width=WIDTH, height=HEIGHT) -> str:
    return "\n".join([
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<title>{escape(title)}</title>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        *body,
        "</svg>",
        "",
    ])


def curve_svg(records: Sequence[EpochRecord], metric: str) -> str:
    """Train vs validation ``loss`` or ``acc`` per epoch."""
    if not records:
        raise ValidationError("cannot plot an empty history")
    series = {f"train_{metric}": [getattr(r, f"train_{metric}") for r in records],
              f"val_{metric}": [getattr(r, f"val_{metric}") for r in records]}
    epochs = [r.epoch for r in records]
    finite = [v for vals in series.values() for v in vals if math.isfinite(v)] or [0.0]
    lo, hi = min(finite), max(finite)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    e0, e1 = min(epochs), max(epochs)
    span = max(e1 - e0, 1)

    def xy(epoch, value):
        x = MARGIN + (epoch - e0) / span * (WIDTH - 2 * MARGIN)
        y = HEIGHT - MARGIN - (value - lo) / (hi - lo) * (HEIGHT - 2 * MARGIN)
        return x, y

    body = [
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="11">epoch</text>',
        f'<text x="{MARGIN - 6}" y="{MARGIN}" text-anchor="end" font-size="10">{hi:.3g}</text>',
        f'<text x="{MARGIN - 6}" y="{HEIGHT - MARGIN}" text-anchor="end" font-size="10">{lo:.3g}</text>',
    ]
    for k, (name, values) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        pts = [xy(e, v) for e, v in zip(epochs, values) if math.isfinite(v)]
        if len(pts) > 1:
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            body.append(f'<polyline class="series" data-series="{name}" points="{path}" '
                        f'fill="none" stroke="{color}"/>')
        for e, v in zip(epochs, values):
            if math.isfinite(v):
                x, y = xy(e, v)
                body.append(f'<circle class="point" data-series="{name}" data-epoch="{e}" '
                            f'data-value="{v!r}" cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{color}"/>')
        body.append(f'<text x="{WIDTH - MARGIN}" y="{MARGIN + 14 * k}" text-anchor="end" '
                    f'font-size="11" fill="{color}">{name}</text>')
    return _doc(body, f"{metric} per epoch")


def pie_svg(distribution: Mapping[str, tuple[int, float]], title="gender distribution") -> str:
    """Pie chart from ``{label: (count, fraction)}``."""
    if not distribution:
        raise ValidationError("cannot plot an empty distribution")
    cx, cy, r = WIDTH / 2, HEIGHT / 2 + 10, 110
    body = []
    start = 0.0
    for k, (label, (count, fraction)) in enumerate(distribution.items()):
        angle = fraction * 360.0
        color = COLORS[k % len(COLORS)]
        attrs = (f'class="sector" data-label="{escape(str(label))}" data-count="{count}" '
                 f'data-fraction="{fraction!r}" data-angle="{angle!r}" fill="{color}"')
        if angle >= 360.0 - 1e-9:
            body.append(f'<circle {attrs} cx="{cx}" cy="{cy}" r="{r}"/>')
        else:
            a0, a1 = math.radians(start - 90), math.radians(start + angle - 90)
            x0, y0 = cx + r * math.cos(a0), cy + r * math.sin(a0)
            x1, y1 = cx + r * math.cos(a1), cy + r * math.sin(a1)
            large = 1 if angle > 180 else 0
            body.append(f'<path {attrs} d="M {cx:.2f} {cy:.2f} L {x0:.2f} {y0:.2f} '
                        f'A {r} {r} 0 {large} 1 {x1:.2f} {y1:.2f} Z"/>')
        mid = math.radians(start + angle / 2 - 90)
        body.append(f'<text x="{cx + 0.6 * r * math.cos(mid):.2f}" y="{cy + 0.6 * r * math.sin(mid):.2f}" '
                    f'text-anchor="middle" font-size="12">{escape(str(label))} {fraction:.1%}</text>')
        start += angle
    return _doc(body, title)


def confusion_svg(cm: ConfusionMatrix) -> str:
    """2x2 heat grid, rows = true class, columns = predicted class."""
    size = 100
    x0, y0 = (WIDTH - 2 * size) / 2 + 20, 60
    peak = max(max(row) for row in cm.counts) or 1
    body = []
    for t, row in enumerate(cm.counts):
        body.append(f'<text x="{x0 - 8}" y="{y0 + t * size + size / 2}" text-anchor="end" '
                    f'font-size="12">{escape(cm.class_names[t])}</text>')
        for p, count in enumerate(row):
            shade = int(255 - 200 * count / peak)
            body.append(f'<rect class="cell" data-true="{t}" data-pred="{p}" data-count="{count}" '
                        f'x="{x0 + p * size}" y="{y0 + t * size}" width="{size}" height="{size}" '
                        f'fill="rgb({shade},{shade},255)" stroke="black"/>')
            body.append(f'<text x="{x0 + p * size + size / 2}" y="{y0 + t * size + size / 2 + 5}" '
                        f'text-anchor="middle" font-size="16">{count}</text>')
    for p, name in enumerate(cm.class_names):
        body.append(f'<text x="{x0 + p * size + size / 2}" y="{y0 + 2 * size + 18}" '
                    f'text-anchor="middle" font-size="12">{escape(name)}</text>')
    body.append(f'<text x="{x0 + size}" y="{y0 + 2 * size + 36}" text-anchor="middle" '
                f'font-size="11">predicted</text>')
    return _doc(body, "confusion matrix")


def render_plots(out_dir, records: Sequence[EpochRecord] | None = None,
                 distribution: Mapping[str, tuple[int, float]] | None = None,
                 cm: ConfusionMatrix | None = None) -> list[Path]:
    """Write whichever plots the given inputs allow; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    docs = {}
    if records is not None:
        docs["loss_curve.svg"] = curve_svg(records, "loss")
        docs["accuracy_curve.svg"] = curve_svg(records, "acc")
    if distribution is not None:
        docs["gender_distribution.svg"] = pie_svg(distribution)
    if cm is not None:
        docs["confusion_matrix.svg"] = confusion_svg(cm)
    paths = []
    for name, text in docs.items():
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
        paths.append(path)
    return paths
