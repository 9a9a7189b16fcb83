"""Plain SVG drawings of rearrangement scenes and navigation traces."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import nav2d, rearrangement

_PX = 60.0          # pixels per arena unit
_FILL = {"circle": "#4c72b0", "triangle": "#dd8452", "square": "#55a868"}
_COLOR = {"red": "#d62728", "yellow": "#e6c229", "purple": "#8e44ad", "green": "#2ca02c"}


def _y(v: float, size: float) -> float:
    return size - v * _PX


def _shape(kind: str, x: float, y: float, r: float, theta: float, size: float, fill: str) -> str:
    cx, cy = x * _PX, _y(y, size)
    rp = r * _PX
    if kind == "circle" or kind == "sphere":
        return f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{rp:.2f}" fill="{fill}" fill-opacity="0.7"/>'
    n = {"triangle": 3, "cone": 3, "square": 4, "cube": 4, "bowl": 6}[kind]
    pts = []
    for i in range(n):
        a = theta + 2 * math.pi * i / n + (math.pi / 4 if n == 4 else math.pi / 2)
        pts.append(f"{cx + rp * math.cos(a):.2f},{cy - rp * math.sin(a):.2f}")
    return f'<polygon points="{" ".join(pts)}" fill="{fill}" fill-opacity="0.7"/>'


def _frame(size: float, body: list[str], title: str) -> str:
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" height="{size + 20:.0f}" '
        f'viewBox="0 -20 {size:.0f} {size + 20:.0f}">',
        f'<rect x="0" y="0" width="{size:.0f}" height="{size:.0f}" fill="white" stroke="#888"/>',
        f'<text x="4" y="-6" font-family="sans-serif" font-size="12">{_escape(title)}</text>',
        *body, "</svg>", ""])


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def scene_svg(scene: np.ndarray, title: str = "") -> str:
    size = rearrangement.ARENA * _PX
    body = []
    for i, name in enumerate(rearrangement.OBJECTS):
        x, y, r, th = scene[i * rearrangement.FEATURES: i * rearrangement.FEATURES + 4]
        body.append(_shape(name, x, y, r, th, size, _FILL[name]))
    return _frame(size, body, title)


def scenes_svg(scenes: np.ndarray, title: str = "", cols: int = 5) -> str:
    """Grid of scenes in one drawing."""
    scenes = np.atleast_2d(scenes)
    cell = rearrangement.ARENA * _PX
    rows = math.ceil(len(scenes) / cols)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * cell:.0f}" height="{rows * cell + 20:.0f}">',
             f'<text x="4" y="14" font-family="sans-serif" font-size="12">{_escape(title)}</text>']
    for i, sc in enumerate(scenes):
        inner = scene_svg(sc).split("\n")[1:-2]
        parts.append(f'<g transform="translate({(i % cols) * cell:.0f},{20 + (i // cols) * cell:.0f})">')
        parts += [p for p in inner if not p.startswith("<text")]
        parts.append("</g>")
    parts += ["</svg>", ""]
    return "\n".join(parts)


def nav_svg(s0: np.ndarray, traces: Sequence[np.ndarray], title: str = "") -> str:
    """Objects of ``s0`` plus one polyline per trace (agent positions)."""
    size = 5.0 * _PX
    body = []
    for slot in range(2):
        color, shape = nav2d.object_attrs(s0, slot)
        x, y = nav2d.object_pos(s0, slot)
        body.append(_shape(shape, x, y, nav2d.ARRIVAL_RADIUS, 0.0, size, _COLOR[color]))
    for tr in traces:
        pts = " ".join(f"{p[0] * _PX:.2f},{_y(p[1], size):.2f}" for p in np.asarray(tr))
        body.append(f'<polyline points="{pts}" fill="none" stroke="#333" stroke-opacity="0.5" stroke-width="1.5"/>')
    ax, ay = s0[0], s0[1]
    body.append(f'<circle cx="{ax * _PX:.2f}" cy="{_y(ay, size):.2f}" r="4" fill="black"/>')
    return _frame(size, body, title)
