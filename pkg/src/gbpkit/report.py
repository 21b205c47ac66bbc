"""Report emission: accuracy-vs-budget SVG charts and group statistics tables."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

from .attack import read_sweep_csv

PALETTE = ["#d62728", "#2ca02c", "#1f77b4", "#17becf", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#bcbd22"]
STAT_COLUMNS = ["Method", "Inactive Groups", "Mean Grp. Acc.", "Found Grp. Combs."]


def _series(rows):
    out = {}
    for r in rows:
        out.setdefault(r["method"], []).append((float(r["epsilon"]), float(r["accuracy"])))
    for v in out.values():
        v.sort()
    return out


def render_svg(rows, title="Accuracy under attack", width=520, height=360):
    """Line chart of accuracy against budget, one polyline per method.

    Returns (svg text, warnings).  A method missing some budgets is drawn
    with a gap at those budgets.
    """
    series = _series(rows)
    eps_all = sorted({e for v in series.values() for e, _ in v})
    warn = []
    for name, pts in series.items():
        missing = [e for e in eps_all if e not in {p[0] for p in pts}]
        if missing:
            warn.append(f"{name}: no data at epsilon {', '.join(f'{e:g}' for e in missing)}")
    left, right, top, bottom = 60, 150, 40, 50
    pw, ph = width - left - right, height - top - bottom
    x_max = max(eps_all) if eps_all and max(eps_all) > 0 else 1.0

    def sx(e):
        return left + pw * e / x_max

    def sy(a):
        return top + ph * (1.0 - a)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in range(6):
        a = k / 5
        out.append(f'<line x1="{left - 4}" y1="{sy(a):.1f}" x2="{left}" y2="{sy(a):.1f}" stroke="black"/>')
        out.append(f'<text x="{left - 7}" y="{sy(a) + 4:.1f}" text-anchor="end">{a:.1f}</text>')
        e = x_max * k / 5
        out.append(f'<line x1="{sx(e):.1f}" y1="{top + ph}" x2="{sx(e):.1f}" y2="{top + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{sx(e):.1f}" y="{top + ph + 16}" text-anchor="middle">{e:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle">epsilon</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.1f})">accuracy</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        have = {e: a for e, a in pts}
        runs, cur = [], []
        for e in eps_all:
            if e in have and not math.isnan(have[e]):
                cur.append((e, have[e]))
            elif cur:
                runs.append(cur)
                cur = []
        if cur:
            runs.append(cur)
        for run in runs:
            coords = " ".join(f"{sx(e):.1f},{sy(a):.1f}" for e, a in run)
            out.append(f'<polyline class="series" data-method="{escape(name)}" points="{coords}" '
                       f'fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 14 * i + 6
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text class="legend" x="{left + pw + 34}" y="{ly + 4}">{escape(name)}</text>')
    if warn:
        for j, w in enumerate(warn):
            out.append(f'<text x="{left}" y="{height - 2 - 12 * (len(warn) - 1 - j)}" fill="#a00" '
                       f'font-size="9">{escape(w)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n", warn


def format_statistics_table(stats):
    """Plain-text table; ``stats`` maps method name to a GroupStatistics."""
    rows = [STAT_COLUMNS]
    for name, s in stats.items():
        rows.append([name, f"{100 * s.inactive_rate:.1f}%", f"{100 * s.mean_group_accuracy:.1f}%",
                     f"{100 * s.exact_combination_rate:.1f}%"])
    widths = [max(len(r[i]) for r in rows) for i in range(len(STAT_COLUMNS))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_statistics_csv(stats, path, seed=0, config_hash=""):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STAT_COLUMNS + ["n_samples", "seed", "config_hash"])
        for name, s in stats.items():
            w.writerow([name, repr(s.inactive_rate), repr(s.mean_group_accuracy), repr(s.exact_combination_rate),
                        s.n_samples, seed, config_hash])


def read_statistics_csv(path):
    from .classify import GroupStatistics
    out = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out[r["Method"]] = GroupStatistics(float(r["Inactive Groups"]), float(r["Mean Grp. Acc."]),
                                               float(r["Found Grp. Combs."]), int(r["n_samples"]))
    return out


def emit_report(directory):
    """Render every sweep CSV in a run directory, plus the statistics table if present.

    Returns the list of written files and the warnings collected.
    """
    d = Path(directory)
    written, warnings = [], []
    sweeps = sorted(d.glob("sweep_*.csv"))
    rows = []
    for p in sweeps:
        rows.extend(read_sweep_csv(p))
    svg, warn = render_svg(rows)
    (d / "accuracy_vs_epsilon.svg").write_text(svg)
    written.append(d / "accuracy_vs_epsilon.svg")
    warnings.extend(warn)
    stats_path = d / "group_statistics.csv"
    lines = ["# Report", ""]
    if stats_path.exists():
        table = format_statistics_table(read_statistics_csv(stats_path))
        (d / "group_statistics.txt").write_text(table)
        written.append(d / "group_statistics.txt")
        lines += ["Group statistics (attack-free):", "", table]
    if rows:
        lines.append("Accuracy under attack:")
        lines.append("")
        for name, pts in _series(rows).items():
            lines.append(f"  {name}: " + ", ".join(f"{e:g}:{a:.3f}" for e, a in pts))
    else:
        lines.append("No sweep data found.")
    if warnings:
        lines += ["", "Warnings:"] + [f"  {w}" for w in warnings]
    (d / "report.md").write_text("\n".join(lines) + "\n")
    written.append(d / "report.md")
    return written, warnings
