"""Deterministic SVG line plots and the CSV data behind them.

Plots are written by hand rather than through a plotting library so that
identical inputs give byte-identical files and every series is exactly
one ``<polyline>`` element.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import SchemaError
from .trajlog import HAT_COLUMNS, WRENCH_COLUMNS, write_columns_csv

REF_COLUMNS = ["px_ref", "py_ref", "pz_ref"]
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
PANEL_W, PANEL_H, MARGIN = 480, 160, 40


def _fmt(x):
    return f"{x:.2f}"


def _scale(lo, hi):
    if not hi > lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


class _Panel:
    def __init__(self, x0, y0, w, h, xlim, ylim, title):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim, self.ylim = _scale(*xlim), _scale(*ylim)
        self.title = title

    def map(self, x, y):
        (a, b), (c, d) = self.xlim, self.ylim
        px = self.x0 + (np.asarray(x) - a) / (b - a) * self.w
        py = self.y0 + self.h - (np.asarray(y) - c) / (d - c) * self.h
        return px, py

    def frame(self):
        return (f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}" '
                f'fill="none" stroke="#444"/>\n'
                f'<text x="{self.x0}" y="{self.y0 - 6}" font-size="12">{self.title}</text>\n'
                f'<text x="{self.x0 - 4}" y="{self.y0 + 10}" font-size="9" text-anchor="end">'
                f'{_fmt(self.ylim[1])}</text>\n'
                f'<text x="{self.x0 - 4}" y="{self.y0 + self.h}" font-size="9" text-anchor="end">'
                f'{_fmt(self.ylim[0])}</text>\n')

    def polyline(self, x, y, color, name, dash=False):
        px, py = self.map(x, y)
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px, py))
        extra = ' stroke-dasharray="4 2"' if dash else ""
        return (f'<polyline data-series="{name}" fill="none" stroke="{color}" '
                f'stroke-width="1"{extra} points="{pts}"/>\n')


def _svg(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n{body}</svg>\n')


def _require(logs):
    if not logs or any(len(log) == 0 for log in logs):
        raise SchemaError("cannot plot an empty log")


def wrench_figure(log):
    """Six stacked panels of true vs predicted wrench components.

    Returns (svg_text, columns) where columns is the data behind the plot.
    """
    _require([log])
    if log.wrench is None:
        raise SchemaError("log has no ground-truth wrench")
    t = log.t
    hat = np.column_stack([log.extras[c] for c in HAT_COLUMNS]) \
        if all(c in log.extras for c in HAT_COLUMNS) else None
    body, cols = "", {"t": t}
    for i, name in enumerate(WRENCH_COLUMNS):
        series = [log.wrench[:, i]] + ([hat[:, i]] if hat is not None else [])
        lo = min(float(np.min(s)) for s in series)
        hi = max(float(np.max(s)) for s in series)
        panel = _Panel(MARGIN + 10, MARGIN + i * (PANEL_H + MARGIN), PANEL_W, PANEL_H,
                       (float(t[0]), float(t[-1])), (lo, hi), name)
        body += panel.frame() + panel.polyline(t, log.wrench[:, i], PALETTE[0], name)
        cols[name] = log.wrench[:, i]
        if hat is not None:
            body += panel.polyline(t, hat[:, i], PALETTE[1], HAT_COLUMNS[i], dash=True)
            cols[HAT_COLUMNS[i]] = hat[:, i]
    height = 6 * (PANEL_H + MARGIN) + MARGIN
    return _svg(PANEL_W + 2 * MARGIN + 10, height, body), cols


def reference_xy(logs):
    for log in logs:
        if all(c in log.extras for c in REF_COLUMNS):
            return np.column_stack([log.extras[c] for c in REF_COLUMNS[:2]])
        if "reference" in log.meta:
            return np.asarray(log.meta["reference"])[:, :2]
    return None


def xy_figure(logs, labels=None, ref_xy=None):
    """XY-plane overlay: one polyline per log plus one for the reference."""
    _require(logs)
    labels = labels or [f"log{i}" for i in range(len(logs))]
    ref_xy = reference_xy(logs) if ref_xy is None else np.asarray(ref_xy)
    if ref_xy is None:
        raise SchemaError("no reference trajectory available")
    pts = np.vstack([ref_xy] + [log.p[:, :2] for log in logs])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = 0.5 * max(float(np.max(hi - lo)), 1e-9) * 1.05
    mid = 0.5 * (lo + hi)
    side = 480
    panel = _Panel(MARGIN, MARGIN, side, side, (mid[0] - half, mid[0] + half),
                   (mid[1] - half, mid[1] + half), "xy")
    body = panel.frame() + panel.polyline(ref_xy[:, 0], ref_xy[:, 1], "#000000", "reference",
                                          dash=True)
    cols = {"x_ref": ref_xy[:, 0], "y_ref": ref_xy[:, 1]}
    n = len(ref_xy)
    for i, (log, name) in enumerate(zip(logs, labels)):
        body += panel.polyline(log.p[:, 0], log.p[:, 1], PALETTE[i % len(PALETTE)], name)
        x = np.full(n, np.nan)
        y = np.full(n, np.nan)
        m = min(n, len(log))
        x[:m], y[:m] = log.p[:m, 0], log.p[:m, 1]
        cols[f"x_{name}"], cols[f"y_{name}"] = x, y
    return _svg(side + 2 * MARGIN, side + 2 * MARGIN, body), cols


def emit_plotdata(logs, kind, out_dir, stem=None, labels=None):
    """Write ``<stem>.svg`` and ``<stem>.csv`` for a ``wrench`` or ``xy`` plot.

    Returns the two paths.
    """
    if hasattr(logs, "t"):
        logs = [logs]
    logs = list(logs)
    if kind == "wrench":
        _require(logs)
        svg, cols = wrench_figure(logs[0])
    elif kind == "xy":
        svg, cols = xy_figure(logs, labels)
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    stem = stem or kind
    os.makedirs(out_dir, exist_ok=True)
    svg_path = os.path.join(out_dir, f"{stem}.svg")
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(svg_path, "w") as fh:
        fh.write(svg)
    write_columns_csv(csv_path, cols)
    return svg_path, csv_path
