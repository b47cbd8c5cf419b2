"""Capacity curves: accuracy against the number of kept filters.

Curves are exchanged as CSV (header ``k,accuracy,checkpoint``, LF line
endings, accuracies written with ``repr`` so they parse back exactly) and
rendered to a standalone SVG line chart.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import CurveParseError, InvalidParameterError

HEADER = ["k", "accuracy", "checkpoint"]


@dataclass(frozen=True)
class CurveRow:
    k: int
    accuracy: float
    checkpoint: str = ""


@dataclass
class CapacityCurve:
    rows: list = field(default_factory=list)
    run_id: str = ""
    total_iterations: int | None = None

    def __post_init__(self):
        ks = [r.k for r in self.rows]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise InvalidParameterError(f"curve k values must be strictly increasing, got {ks}")
        for r in self.rows:
            if not 0.0 <= r.accuracy <= 1.0:
                raise InvalidParameterError(f"accuracy {r.accuracy} at k={r.k} outside [0, 1]")

    @property
    def ks(self):
        return [r.k for r in self.rows]

    @property
    def accuracies(self):
        return [r.accuracy for r in self.rows]

    def at(self, k):
        for r in self.rows:
            if r.k == k:
                return r.accuracy
        raise KeyError(k)


def select_capacity(curve: CapacityCurve, epsilon=0.005):
    """Smallest k whose accuracy is within ``epsilon`` of the curve's best."""
    if not curve.rows:
        raise InvalidParameterError("cannot select a capacity from an empty curve")
    if epsilon < 0:
        raise InvalidParameterError(f"epsilon must be >= 0, got {epsilon}")
    best = max(curve.accuracies)
    return min(r.k for r in curve.rows if r.accuracy >= best - epsilon)


def curve_to_csv(curve: CapacityCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in curve.rows:
        w.writerow([r.k, repr(float(r.accuracy)), r.checkpoint])
    return buf.getvalue()


def parse_curve_csv(text, run_id="") -> CapacityCurve:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].rstrip("\r") != ",".join(HEADER):
        raise CurveParseError(f"expected header {','.join(HEADER)!r}", line=1)
    rows = []
    for lineno, fields in enumerate(csv.reader(lines[1:]), start=2):
        if len(fields) != 3:
            raise CurveParseError(f"expected 3 fields, got {len(fields)}", line=lineno)
        try:
            k = int(fields[0])
            acc = float(fields[1])
        except ValueError as exc:
            raise CurveParseError(str(exc), line=lineno) from exc
        if not math.isfinite(acc) or not 0.0 <= acc <= 1.0:
            raise CurveParseError(f"accuracy {fields[1]!r} outside [0, 1]", line=lineno)
        if rows and k <= rows[-1].k:
            raise CurveParseError(f"k={k} does not increase", line=lineno)
        rows.append(CurveRow(k, acc, fields[2]))
    if not rows:
        raise CurveParseError("curve has a header but no rows", line=len(lines) + 1)
    return CapacityCurve(rows, run_id=run_id)


def write_curve(curve: CapacityCurve, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(curve_to_csv(curve))
    return path


def read_curve(path, run_id=None) -> CapacityCurve:
    path = Path(path)
    return parse_curve_csv(path.read_text(), run_id=path.stem if run_id is None else run_id)


# -- SVG -------------------------------------------------------------------

WIDTH, HEIGHT = 640, 420
MARGIN = {"left": 70, "right": 170, "top": 30, "bottom": 60}
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]


def plot_frame(curves):
    """Data-to-pixel mapping shared by the renderer and its tests."""
    ks = [k for c in curves for k in c.ks]
    kmin, kmax = min(ks), max(ks)
    if kmin == kmax:
        kmin, kmax = kmin - 1, kmax + 1
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def to_px(k, acc):
        return (x0 + (k - kmin) / (kmax - kmin) * (x1 - x0), y0 + acc * (y1 - y0))

    return to_px, (kmin, kmax)


def render_svg(curves) -> str:
    if not curves:
        raise InvalidParameterError("nothing to plot")
    to_px, (kmin, kmax) = plot_frame(curves)
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    yb, yt = HEIGHT - MARGIN["bottom"], MARGIN["top"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line class="axis" x1="{x0}" y1="{yb}" x2="{x1}" y2="{yb}" stroke="black"/>',
        f'<line class="axis" x1="{x0}" y1="{yb}" x2="{x0}" y2="{yt}" stroke="black"/>',
    ]
    for i in range(6):
        acc = i / 5
        _, y = to_px(kmin, acc)
        out.append(f'<text x="{x0 - 8}" y="{y + 4:.2f}" text-anchor="end">{acc:.1f}</text>')
    for k in sorted({k for c in curves for k in c.ks}):
        x, _ = to_px(k, 0)
        out.append(f'<text x="{x:.2f}" y="{yb + 16}" text-anchor="middle">{k}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.2f}" y="{HEIGHT - 15}" text-anchor="middle">filters kept</text>')
    out.append(
        f'<text x="18" y="{(yb + yt) / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(yb + yt) / 2:.2f})">test accuracy</text>'
    )
    for i, c in enumerate(curves):
        color = COLORS[i % len(COLORS)]
        pts = " ".join("{:.2f},{:.2f}".format(*to_px(r.k, r.accuracy)) for r in c.rows)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = yt + 10 + 18 * i
        out.append(f'<line x1="{x1 + 15}" y1="{ly}" x2="{x1 + 35}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{x1 + 40}" y="{ly + 4}">{escape(c.run_id or f"curve {i + 1}")}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_curves(csv_paths, out_path, labels=None):
    curves = [read_curve(p) for p in csv_paths]
    if labels:
        for c, lab in zip(curves, labels):
            c.run_id = lab
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(render_svg(curves))
    return out_path
