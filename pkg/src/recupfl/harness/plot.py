"""Static SVG rendering of utility-privacy trade-off curves."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from recupfl.errors import ConfigError
from recupfl.harness.analysis import median_curve
from recupfl.harness.results import TradeoffPoint

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf", "#bcbd22")


@dataclass(frozen=True)
class Axes:
    adversary: str | None = None
    round: int | None = None
    title: str = ""
    width: int = 480
    height: int = 360


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    return np.linspace(lo, hi, n)


def render_svg(points: Sequence[TradeoffPoint], axes: Axes = Axes()) -> str:
    """One polyline and one marker per parameter value for each defense; x = loss, y = ASR."""
    usable = [p for p in points if not p.is_error and p.asr is not None and p.loss is not None]
    defenses = list(dict.fromkeys(p.defense for p in usable))
    curves = [(d, median_curve(usable, d, axes.adversary, axes.round)) for d in defenses]
    curves = [(d, c) for d, c in curves if len(c)]
    if not curves:
        raise ConfigError("nothing to plot: no usable trade-off points")
    losses = np.concatenate([c.loss for _, c in curves])
    x_lo, x_hi = float(losses.min()), float(losses.max())
    if x_hi - x_lo < 1e-12:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    pad = 0.05 * (x_hi - x_lo)
    x_lo, x_hi = x_lo - pad, x_hi + pad
    y_lo, y_hi = 0.0, 1.0

    w, h = axes.width, axes.height
    left, right, top, bottom = 60, 130, 30, 45
    pw, ph = w - left - right, h - top - bottom

    def sx(v):
        return left + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return top + (1.0 - (v - y_lo) / (y_hi - y_lo)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x_lo, x_hi):
        out.append(f'<text x="{_fmt(sx(t))}" y="{_fmt(top + ph + 15)}" font-size="10" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<text x="{left - 6}" y="{_fmt(sy(t) + 3)}" font-size="10" text-anchor="end">{t:.2f}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{h - 8}" font-size="12" text-anchor="middle">learning loss</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.2f}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {top + ph / 2:.2f})">ASR</text>')
    if axes.title:
        out.append(f'<text x="{w / 2:.2f}" y="18" font-size="13" text-anchor="middle">{escape(axes.title)}</text>')
    for i, (name, c) in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        order = np.argsort(c.loss, kind="stable")
        coords = " ".join(f"{_fmt(sx(c.loss[k]))},{_fmt(sy(c.asr[k]))}" for k in order)
        out.append(f'<g class="curve" data-defense="{escape(name)}">')
        if len(c) > 1:
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for k in order:
            out.append(f'<circle class="marker" cx="{_fmt(sx(c.loss[k]))}" cy="{_fmt(sy(c.asr[k]))}" r="3" fill="{color}"/>')
        out.append("</g>")
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(points: Sequence[TradeoffPoint], path: str | Path, axes: Axes = Axes()) -> Path:
    """Write the SVG for ``points`` to ``path``."""
    if not points:
        raise ConfigError("emit_plot needs at least one point")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(points, axes), encoding="utf-8")
    return path
