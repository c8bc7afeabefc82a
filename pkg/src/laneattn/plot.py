"""Static SVG drawing of one scene and its predicted hypotheses."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .dataset import Scene
from .network import GaussianTrajectory

PALETTE = ("#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f")
LANE_COLOR = "#b0b0b0"
HISTORY_COLOR = "#1f77b4"
TRUTH_COLOR = "#2ca02c"


def scene_svg(scene: Scene, hypotheses: Sequence[GaussianTrajectory], size: int = 800, margin: float = 5.0) -> str:
    """City-frame drawing: lanes gray, history blue, ground truth green, hypotheses colored."""
    lanes = [scene.frame.to_world(l) for l in scene.lanes]
    history, truth = scene.obs_world, scene.future_world
    every = np.concatenate([history, truth] + lanes + [h.mu for h in hypotheses])
    lo, hi = every.min(axis=0) - margin, every.max(axis=0) + margin
    scale = size / float(max(hi - lo))

    def xy(p):
        return (p[0] - lo[0]) * scale, (hi[1] - p[1]) * scale

    def path(points, color, width, dash=None):
        d = " ".join(f"{'M' if i == 0 else 'L'}{x:.2f},{y:.2f}" for i, (x, y) in enumerate(map(xy, points)))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return (f'<path d="{d}" fill="none" stroke="{color}" stroke-width="{width}" '
                f'stroke-linecap="round" stroke-linejoin="round"{extra}/>')

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f"<title>{escape(scene.scene_id)}</title>",
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for lane_id, pts in zip(scene.lane_ids, lanes):
        parts.append(path(pts, LANE_COLOR, 6))
        x, y = xy(pts[-1])
        parts.append(f'<text x="{x:.2f}" y="{y:.2f}" font-size="11" fill="#606060">{escape(lane_id)}</text>')
    parts.append(path(history, HISTORY_COLOR, 3))
    parts.append(path(truth, TRUTH_COLOR, 3))
    for i, h in enumerate(hypotheses):
        color = PALETTE[i % len(PALETTE)]
        parts.append(path(h.mu, color, 2, "6,3" if h.sampled else None))
        x, y = xy(h.mu[-1])
        parts.append(f'<text x="{x + 4:.2f}" y="{y - 4:.2f}" font-size="12" fill="{color}">'
                     f"{h.probability:.2f}</text>")
    x, y = xy(history[-1])
    parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{HISTORY_COLOR}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
