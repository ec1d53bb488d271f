"""Deterministic SVG snapshots of confidence ellipses and obstacles.

Hand-rolled SVG keeps the output byte-stable across runs: fixed float
formatting, elements emitted in clique-id order, colors from a fixed
per-level palette.
"""

from __future__ import annotations

import math

import numpy as np

from .core import Scenario

LEVEL_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#bcbd22", "#9467bd",
                "#17becf", "#e377c2", "#8c564b"]


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _ellipse_svg(center, shape, alpha, color, style="solid") -> str:
    w, v = np.linalg.eigh(0.5 * (shape + shape.T))
    rx = math.sqrt(max(alpha * float(w[1]), 0.0))
    ry = math.sqrt(max(alpha * float(w[0]), 0.0))
    ang = math.degrees(math.atan2(float(v[1, 1]), float(v[0, 1])))
    dash = "" if style == "solid" else ' stroke-dasharray="0.12 0.08"'
    return (
        f'<ellipse cx="0" cy="0" rx="{_fmt(rx)}" ry="{_fmt(ry)}" '
        f'transform="translate({_fmt(float(center[0]))} '
        f'{_fmt(float(center[1]))}) rotate({_fmt(ang)})" '
        f'fill="{color}" fill-opacity="0.12" stroke="{color}" '
        f'stroke-width="0.03"{dash}/>'
    )


def _svg_document(elements: list, bounds) -> str:
    (x0, y0, x1, y1) = bounds
    pad = 0.05 * max(x1 - x0, y1 - y0, 1.0)
    vb = (f"{_fmt(x0 - pad)} {_fmt(y0 - pad)} "
          f"{_fmt(x1 - x0 + 2 * pad)} {_fmt(y1 - y0 + 2 * pad)}")
    body = "\n".join(elements)
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{vb}" '
        'width="800" height="800">\n'
        f'<g transform="scale(1,-1)">\n{body}\n</g>\n</svg>\n'
    )


def _obstacle_elements(scenario: Scenario) -> list:
    return [
        f'<circle cx="{_fmt(float(o.center[0]))}" '
        f'cy="{_fmt(float(o.center[1]))}" r="{_fmt(o.radius)}" '
        'fill="#000000" fill-opacity="0.85"/>'
        for o in scenario.obstacles
    ]


def _track_bounds(points, bounds=None):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    if bounds is None:
        return [lo[0], lo[1], hi[0], hi[1]]
    return [min(bounds[0], lo[0]), min(bounds[1], lo[1]),
            max(bounds[2], hi[0]), max(bounds[3], hi[1])]


def render_levels(scenario: Scenario, levels: dict, phase: str) -> str:
    """Snapshot of the estimated level Gaussians plus the leaves.

    ``levels`` maps clique id to (level, Gaussian) for the requested
    phase ('initial' or 'target').
    """
    H = scenario.system.H
    alpha = scenario.alpha
    elements = _obstacle_elements(scenario)
    bounds = None
    leaf = (scenario.leaf_initial if phase == "initial"
            else scenario.leaf_target)
    items = [(scenario.hierarchy.cliques[a].level, a, g)
             for a, g in leaf.items()]
    items += [(lv, cid, g) for cid, (lv, g) in levels.items()]
    for lv, cid, g in sorted(items):
        center = H @ g.mean
        shape = H @ g.cov @ H.T
        color = LEVEL_COLORS[(lv - 1) % len(LEVEL_COLORS)]
        elements.append(_ellipse_svg(center, shape, alpha, color))
        rad = math.sqrt(alpha * float(np.linalg.eigvalsh(shape)[1]))
        bounds = _track_bounds([center - rad, center + rad], bounds)
    for o in scenario.obstacles:
        bounds = _track_bounds([o.center - o.radius, o.center + o.radius],
                               bounds)
    return _svg_document(elements, bounds)


def render_snapshot(scenario: Scenario, policies: dict, k: int) -> str:
    """Snapshot of every solved clique's ellipse at time step k.

    ``policies`` maps clique id to (level, policy, moments) as loaded
    from a policies document.
    """
    N = scenario.system.N
    if not 0 <= k <= N:
        raise ValueError(f"time step {k} outside horizon 0..{N}")
    H = scenario.system.H
    alpha = scenario.alpha
    elements = _obstacle_elements(scenario)
    bounds = None
    for cid in sorted(policies):
        lv, _pol, mom = policies[cid]
        center = H @ mom.means[k]
        shape = H @ mom.covs[k] @ H.T
        color = LEVEL_COLORS[(lv - 1) % len(LEVEL_COLORS)]
        elements.append(_ellipse_svg(center, shape, alpha, color))
        rad = math.sqrt(alpha * float(np.linalg.eigvalsh(shape)[1]))
        bounds = _track_bounds([center - rad, center + rad], bounds)
    for o in scenario.obstacles:
        bounds = _track_bounds([o.center - o.radius, o.center + o.radius],
                               bounds)
    return _svg_document(elements, bounds)
