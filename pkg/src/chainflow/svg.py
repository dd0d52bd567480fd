"""Plain-SVG rendering of one planned scenario."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .evaluate import PlanResult
from .scenario import Scenario

PALETTE = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22",
           "#7f7f7f"]


def _path(pts: np.ndarray, tf, **attrs) -> str:
    d = " ".join(f"{'M' if i == 0 else 'L'}{x:.2f},{y:.2f}"
                 for i, (x, y) in enumerate(tf(pts)))
    a = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in attrs.items())
    return f'<path d="{d}" fill="none" {a}/>'


def render_plan(scenario: Scenario, plan: PlanResult, size: int = 640, margin: float = 8.0) -> str:
    """Corridor, obstacles, expert (dashed black), proposals (thin), refined (solid),
    selected candidate (thick red)."""
    ego = np.array([[scenario.ego_init.x, scenario.ego_init.y]])
    clouds = [ego, scenario.expert.positions] + [t.positions for t in plan.proposals]
    clouds += [t.positions for t in plan.candidates]
    if scenario.obstacles:
        clouds.append(np.array([o.center for o in scenario.obstacles]))
    allpts = np.concatenate(clouds)
    lo = allpts.min(0) - margin
    hi = allpts.max(0) + margin
    span = float(max(hi - lo))
    k = size / span

    def tf(p):
        p = np.asarray(p)
        return np.stack([(p[:, 0] - lo[0]) * k, size - (p[:, 1] - lo[1]) * k], axis=1)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f"<title>{escape(scenario.id)} ({scenario.maneuver.value})</title>",
           f'<rect width="{size}" height="{size}" fill="white"/>']
    c = scenario.corridor
    out.append('<g id="corridor">')
    out.append(_path(c.centerline, tf, stroke="#dddddd",
                     stroke_width=f"{2 * c.half_width * k:.2f}", stroke_linejoin="round"))
    out.append(_path(c.centerline, tf, stroke="#aaaaaa", stroke_dasharray="4 4"))
    out.append("</g>")
    out.append('<g id="obstacles">')
    for o in scenario.obstacles:
        (cx, cy), = tf([o.center])
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{o.radius * k:.2f}" '
                   'fill="#ff9896" stroke="#d62728"/>')
    out.append("</g>")
    out.append('<g id="proposals">')
    for i, t in enumerate(plan.proposals):
        pts = np.vstack([ego, t.positions])
        out.append(_path(pts, tf, stroke=PALETTE[i % len(PALETTE)], stroke_width=1,
                         stroke_opacity=0.5, stroke_dasharray="2 2"))
    out.append("</g>")
    out.append('<g id="refined">')
    for i, t in enumerate(plan.candidates):
        pts = np.vstack([ego, t.positions])
        out.append(_path(pts, tf, stroke=PALETTE[i % len(PALETTE)], stroke_width=1.5))
    out.append("</g>")
    out.append('<g id="expert">')
    out.append(_path(np.vstack([ego, scenario.expert.positions]), tf, stroke="black",
                     stroke_width=2, stroke_dasharray="6 3"))
    out.append("</g>")
    out.append('<g id="selected">')
    out.append(_path(np.vstack([ego, plan.trajectory.positions]), tf, stroke="#d62728",
                     stroke_width=3.5))
    out.append("</g>")
    (ex, ey), = tf(ego)
    out.append(f'<circle cx="{ex:.2f}" cy="{ey:.2f}" r="{k:.2f}" fill="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
