"""Polygon geometry: scanline rasterization, clipping, area.

A pixel (x, y) belongs to a polygon when its center (x + 0.5, y + 0.5)
is inside under the even-odd rule.  Per row, edge crossings with the
horizontal line through the centers are sorted and paired; each pair
[c0, c1) fills the pixels whose centers fall in the half-open span, so
centers landing exactly on a crossing resolve deterministically.
"""

from __future__ import annotations

import math

import numpy as np


def rasterize_polygon(poly, height: int, width: int) -> np.ndarray:
    """[H, W] uint8 mask of the polygon's even-odd interior."""
    verts = np.asarray(poly.vertices, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[0] < 3:
        raise ValueError(f"polygon needs at least 3 vertices, got {verts.shape}")
    mask = np.zeros((height, width), np.uint8)
    x1, y1 = verts[:, 0], verts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    lo_row = max(int(math.floor(y1.min() - 0.5)), 0)
    hi_row = min(int(math.ceil(y1.max() + 0.5)), height)
    for row in range(lo_row, hi_row):
        yc = row + 0.5
        # an edge crosses the scanline when exactly one endpoint is at or
        # below it; horizontal edges never do
        hit = (y1 <= yc) != (y2 <= yc)
        if not hit.any():
            continue
        t = (yc - y1[hit]) / (y2[hit] - y1[hit])
        crossings = np.sort(x1[hit] + t * (x2[hit] - x1[hit]))
        for k in range(0, len(crossings) - 1, 2):
            # pixel center x+0.5 in [c0, c1)  <=>  x in [c0-0.5, c1-0.5)
            lo = max(math.ceil(crossings[k] - 0.5), 0)
            hi = min(math.ceil(crossings[k + 1] - 0.5), width)
            if hi > lo:
                mask[row, lo:hi] = 1
    return mask


def polygon_area(vertices) -> float:
    """Unsigned shoelace area."""
    verts = np.asarray(vertices, dtype=np.float64)
    x, y = verts[:, 0], verts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return abs(float(np.sum(x * yn - xn * y))) / 2.0


def clip_polygon(vertices, x0: float, y0: float, x1: float, y1: float):
    """Clip to the axis-aligned rectangle [x0,x1]x[y0,y1].

    Sutherland-Hodgman against each of the four half-planes.  The result
    may be empty; for non-convex inputs it can contain degenerate
    bridging edges, which the even-odd fill rule tolerates.
    """
    def clip_half(points, inside, intersect):
        out = []
        for i, p in enumerate(points):
            q = points[(i + 1) % len(points)]
            p_in, q_in = inside(p), inside(q)
            if p_in:
                out.append(p)
                if not q_in:
                    out.append(intersect(p, q))
            elif q_in:
                out.append(intersect(p, q))
        return out

    def cross_x(bound):
        def at(p, q):
            t = (bound - p[0]) / (q[0] - p[0])
            return (bound, p[1] + t * (q[1] - p[1]))
        return at

    def cross_y(bound):
        def at(p, q):
            t = (bound - p[1]) / (q[1] - p[1])
            return (p[0] + t * (q[0] - p[0]), bound)
        return at

    pts = [(float(x), float(y)) for x, y in vertices]
    for inside, intersect in (
            (lambda p: p[0] >= x0, cross_x(x0)),
            (lambda p: p[0] <= x1, cross_x(x1)),
            (lambda p: p[1] >= y0, cross_y(y0)),
            (lambda p: p[1] <= y1, cross_y(y1))):
        if not pts:
            return []
        pts = clip_half(pts, inside, intersect)
    return pts
