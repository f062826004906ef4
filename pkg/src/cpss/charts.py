"""Standalone SVG charts rendered from a MetricsSummary (no plotting dependency)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

from .traffic import REGIMES

COLORS = {"unshielded": "#D1495B", "shielded": "#00798C"}
LABELS = {"unshielded": "Unshielded", "shielded": "Shielded"}
WIDTH, HEIGHT = 720, 420
LEFT, RIGHT, TOP, BOTTOM = 80, 30, 60, 80


def _frame(title: str, y_label: str, y_max: float, body: list[str], legend: list[str]) -> str:
    plot_h = HEIGHT - TOP - BOTTOM
    ticks = []
    for i in range(5):
        value = y_max * i / 4
        y = TOP + plot_h * (1 - i / 4)
        ticks.append(f'<line x1="{LEFT - 4}" y1="{y:.2f}" x2="{WIDTH - RIGHT}" y2="{y:.2f}" stroke="#DDD"/>')
        ticks.append(f'<text x="{LEFT - 8}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{value:.3g}</text>')
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">\n'
        f'<rect width="100%" height="100%" fill="#FFFFFF"/>\n'
        f'<text x="{WIDTH / 2}" y="28" font-size="17" text-anchor="middle">{escape(title)}</text>\n'
        + "\n".join(ticks) + "\n"
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + plot_h}" stroke="#222"/>\n'
        f'<line x1="{LEFT}" y1="{TOP + plot_h}" x2="{WIDTH - RIGHT}" y2="{TOP + plot_h}" stroke="#222"/>\n'
        f'<text transform="translate(20,{TOP + plot_h / 2}) rotate(-90)" font-size="13" '
        f'text-anchor="middle">{escape(y_label)}</text>\n'
        + "\n".join(body) + "\n" + "\n".join(legend) + "\n</svg>\n"
    )


def _legend(methods) -> list[str]:
    out = []
    for i, m in enumerate(methods):
        x = LEFT + 10 + 130 * i
        y = HEIGHT - 22
        out.append(f'<rect x="{x}" y="{y - 10}" width="12" height="12" fill="{COLORS.get(m, "#888")}"/>')
        out.append(f'<text x="{x + 18}" y="{y}" font-size="12">{escape(LABELS.get(m, m))}</text>')
    return out


def _nice_max(values) -> float:
    finite = [v for v in values if math.isfinite(v)]
    top = max(finite, default=0.0)
    if top <= 0:
        return 1.0
    scale = 10 ** math.floor(math.log10(top))
    for step in (1, 2, 2.5, 5, 10):
        if step * scale >= top:
            return step * scale
    return 10 * scale


def grouped_bars(title: str, y_label: str, groups: list[str], series: dict[str, list[float]]) -> str:
    plot_w = WIDTH - LEFT - RIGHT
    plot_h = HEIGHT - TOP - BOTTOM
    y_max = _nice_max(v for vals in series.values() for v in vals)
    slot = plot_w / max(len(groups), 1)
    bar_w = slot * 0.7 / max(len(series), 1)
    body = []
    for g, name in enumerate(groups):
        x0 = LEFT + g * slot + slot * 0.15
        for s, (method, values) in enumerate(series.items()):
            v = values[g] if math.isfinite(values[g]) else 0.0
            h = plot_h * v / y_max
            x = x0 + s * bar_w
            body.append(f'<rect x="{x:.2f}" y="{TOP + plot_h - h:.2f}" width="{bar_w:.2f}" height="{h:.2f}" '
                        f'fill="{COLORS.get(method, "#888")}"><title>{escape(method)} {values[g]:.4f}</title></rect>')
        body.append(f'<text x="{LEFT + (g + 0.5) * slot:.2f}" y="{TOP + plot_h + 18}" font-size="12" '
                    f'text-anchor="middle">{escape(name)}</text>')
    return _frame(title, y_label, y_max, body, _legend(series))


def lines(title: str, y_label: str, xs: list[str], series: dict[str, list[float]]) -> str:
    plot_w = WIDTH - LEFT - RIGHT
    plot_h = HEIGHT - TOP - BOTTOM
    y_max = _nice_max(v for vals in series.values() for v in vals)
    step = plot_w / max(len(xs), 1)
    body = []
    for i, name in enumerate(xs):
        body.append(f'<text x="{LEFT + (i + 0.5) * step:.2f}" y="{TOP + plot_h + 18}" font-size="12" '
                    f'text-anchor="middle">{escape(name)}</text>')
    for method, values in series.items():
        pts = [(LEFT + (i + 0.5) * step, TOP + plot_h * (1 - v / y_max)) for i, v in enumerate(values)]
        color = COLORS.get(method, "#888")
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        body.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2.5"/>')
        body.extend(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{color}"/>' for x, y in pts)
    return _frame(title, y_label, y_max, body, _legend(series))


def render_all(summary) -> dict[str, str]:
    """File name -> SVG text for the three standard figures."""
    methods = [m for m in ("unshielded", "shielded") if m in summary.grand]
    regimes = [g for g in REGIMES if any((g, m) in summary.by_regime for m in methods)]
    scenarios = sorted({s for s, _ in summary.by_scenario})
    by_regime = {m: [summary.by_regime[(g, m)]["collision_rate"] for g in regimes] for m in methods}
    by_scenario = {m: [summary.by_scenario[(s, m)]["collision_rate"] for s in scenarios] for m in methods}
    metrics = ["collision_rate", "proximity_risk_norm", "min_distance_mean"]
    # each metric scaled by the larger method value so the three share one axis
    three = {m: [] for m in methods}
    for metric in metrics:
        top = max((abs(summary.grand[m][metric]) for m in methods
                   if math.isfinite(summary.grand[m][metric])), default=0.0) or 1.0
        for m in methods:
            three[m].append(summary.grand[m][metric] / top)
    return {
        "collision_by_regime.svg": lines("Collision rate by regime", "collision rate", regimes, by_regime),
        "collision_by_scenario.svg": grouped_bars("Collision rate by scenario", "collision rate",
                                                  scenarios, by_scenario),
        "metrics_summary.svg": grouped_bars("Safety metrics (relative to the larger method)", "relative value",
                                            ["collision", "proximity risk", "min distance"], three),
    }
