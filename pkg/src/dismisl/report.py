"""Report writers: canonical JSON, CSV tables and an SVG Kaplan-Meier plot.

Every writer is deterministic: keys are sorted, floats use ``repr`` and no
timestamps are embedded, so identical inputs give identical bytes.
"""

import csv
import json
import math

import numpy as np


def jsonable(obj):
    """Plain-Python copy of ``obj`` (numpy scalars and arrays, tuples, NaN)."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj):
    return json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])


def write_km_csv(path, stratification):
    write_csv(path, ("time", "survival", "at_risk", "group"), stratification.km_rows())


def write_profile_csv(path, table, percentiles):
    header = ["decile"] + [f"p{p:g}" for p in percentiles]
    rows = [[i + 1] + [float(v) for v in row] for i, row in enumerate(np.asarray(table))]
    write_csv(path, header, rows)


def _step_path(times, surv, sx, sy):
    pts = [(0.0, 1.0)]
    level = 1.0
    for t, s in zip(times, surv):
        pts.append((t, level))
        pts.append((t, s))
        level = s
    return " ".join(f"{'M' if i == 0 else 'L'}{sx(t):.2f},{sy(s):.2f}" for i, (t, s) in enumerate(pts))


def km_svg(stratification, title="Kaplan-Meier estimate by risk group"):
    """Two step curves (high and low risk), axes, labels and the log-rank p."""
    width, height = 640, 420
    left, right, top, bottom = 70, 20, 40, 60
    curves = stratification.km
    t_max = max([float(c.event_times[-1]) for c in curves.values() if c.event_times.size] + [1.0])
    sx = lambda t: left + (width - left - right) * t / t_max
    sy = lambda s: top + (height - top - bottom) * (1.0 - s)
    colors = {"high": "#c0392b", "low": "#2471a3"}
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="22" text-anchor="middle" font-size="15">{title}</text>',
        f'<line x1="{left}" y1="{sy(0):.2f}" x2="{width - right}" y2="{sy(0):.2f}" stroke="black"/>',
        f'<line x1="{left}" y1="{sy(0):.2f}" x2="{left}" y2="{sy(1):.2f}" stroke="black"/>',
    ]
    for s in (0.0, 0.25, 0.5, 0.75, 1.0):
        out.append(f'<text x="{left - 8}" y="{sy(s) + 4:.2f}" text-anchor="end" font-size="11">{s:.2f}</text>')
    for i in range(5):
        t = t_max * i / 4
        out.append(f'<text x="{sx(t):.2f}" y="{sy(0) + 16:.2f}" text-anchor="middle" font-size="11">{t:.3g}</text>')
    out.append(f'<text x="{(left + width - right) / 2:.0f}" y="{height - 15}" text-anchor="middle" font-size="13">Time</text>')
    out.append(f'<text x="18" y="{(top + height - bottom) / 2:.0f}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 18 {(top + height - bottom) / 2:.0f})">Survival probability</text>')
    for row, group in enumerate(("high", "low")):
        if group not in curves:
            continue
        c = curves[group]
        path = _step_path([float(t) for t in c.event_times], [float(s) for s in c.survival], sx, sy)
        out.append(f'<path d="{path}" fill="none" stroke="{colors[group]}" stroke-width="2"/>')
        y = top + 12 + 16 * row
        out.append(f'<line x1="{width - 150}" y1="{y}" x2="{width - 130}" y2="{y}" stroke="{colors[group]}" stroke-width="2"/>')
        out.append(f'<text x="{width - 125}" y="{y + 4}" font-size="12">{group} risk</text>')
    if stratification.logrank is not None:
        label = f"log-rank p = {stratification.logrank.p_value:.3g}"
    else:
        label = "log-rank test omitted (single group)"
    out.append(f'<text x="{left + 10}" y="{sy(0) - 10:.2f}" font-size="12">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_km_svg(path, stratification):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(km_svg(stratification))
