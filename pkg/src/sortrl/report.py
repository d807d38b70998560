"""CSV schemas and the SVG reward-vs-epsilon plot."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

from .adversary import SweepRow

SCHEMA_VERSION = 1
SWEEP_FIELDS = ["env", "attack", "eps", "episodes", "mean_reward", "std_err", "flip_rate", "mean_margin"]
REPORT_FIELDS = ["env", "method", "attack", "eps", "episodes", "mean_reward", "std_err", "acr"]
RETURNS_FIELDS = ["method", "eps", "episode", "return"]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write(path, fields, rows: Iterable[Sequence], schema: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema}/{SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_sweep(path, rows: Sequence[SweepRow]) -> None:
    _write(path, SWEEP_FIELDS, ([r.env, r.attack, r.eps, r.episodes, r.mean_reward, r.std_err, r.flip_rate,
                                 r.mean_margin] for r in rows), "sweep")


def write_returns(path, rows: Sequence[SweepRow]) -> None:
    _write(path, RETURNS_FIELDS, ([r.method, r.eps, i, float(v)] for r in rows for i, v in enumerate(r.returns)),
           "returns")


def write_report(path, rows: Sequence[SweepRow], acr_by_method: dict | None = None) -> None:
    acr_by_method = acr_by_method or {}

    def acr_for(r: SweepRow):
        table = acr_by_method.get(r.method)
        return table.get(round(r.eps, 10), float("nan")) if table else float("nan")

    _write(path, REPORT_FIELDS, ([r.env, r.method, r.attack, r.eps, r.episodes, r.mean_reward, r.std_err,
                                  acr_for(r)] for r in rows), "report")


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------

COLORS = {"teacher": "#1f77b4", "sortrl": "#ff7f0e"}
FALLBACK = ["#2ca02c", "#d62728", "#9467bd", "#8c564b"]


def plot_svg(report_rows: Sequence[dict], path, title: str = "", width: int = 480, height: int = 360) -> None:
    """Mean episode reward vs epsilon, one polyline per method with a +/-1 SE band."""
    series: dict[str, list[tuple[float, float, float]]] = defaultdict(list)
    for r in report_rows:
        series[r["method"]].append((float(r["eps"]), float(r["mean_reward"]), float(r["std_err"])))
    for pts in series.values():
        pts.sort()
    xs = [p[0] for pts in series.values() for p in pts] or [0.0, 1.0]
    lo_y = min((p[1] - p[2] for pts in series.values() for p in pts), default=0.0)
    hi_y = max((p[1] + p[2] for pts in series.values() for p in pts), default=1.0)
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1.0
    if hi_y == lo_y:
        hi_y = lo_y + 1.0
    pad = 0.05 * (hi_y - lo_y)
    lo_y, hi_y = lo_y - pad, hi_y + pad
    ml, mr, mt, mb = 60, 20, 30, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + (hi_y - y) / (hi_y - lo_y) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for i in range(6):
        xv = x0 + i * (x1 - x0) / 5
        yv = lo_y + i * (hi_y - lo_y) / 5
        out.append(f'<text x="{sx(xv):.1f}" y="{mt + ph + 15}" text-anchor="middle">{xv:.2f}</text>')
        out.append(f'<text x="{ml - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.0f}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">epsilon</text>')
    out.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2})">mean episode reward</text>')
    if title:
        out.append(f'<text x="{ml + pw / 2}" y="18" text-anchor="middle">{escape(title)}</text>')
    for k, (method, pts) in enumerate(sorted(series.items())):
        color = COLORS.get(method, FALLBACK[k % len(FALLBACK)])
        upper = " ".join(f"{sx(x):.2f},{sy(m + s):.2f}" for x, m, s in pts)
        lower = " ".join(f"{sx(x):.2f},{sy(m - s):.2f}" for x, m, s in reversed(pts))
        out.append(f'<polygon class="band" data-method="{escape(method)}" points="{upper} {lower}" '
                   f'fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{sx(x):.2f},{sy(m):.2f}" for x, m, _ in pts)
        out.append(f'<polyline class="series" data-method="{escape(method)}" points="{line}" '
                   f'fill="none" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw - 5}" y="{mt + 15 + 14 * k}" text-anchor="end" fill="{color}">'
                   f'{escape(method)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
