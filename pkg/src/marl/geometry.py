"""Planar polygon helpers for building footprints.

Polygons are simple rings given as a list of (x, y) vertices in meters, without
a repeated closing vertex. Vertex order may be either winding; area helpers
return magnitudes unless noted.
"""

from __future__ import annotations

import numpy as np

Point = tuple[float, float]


def signed_area(polygon: list[Point]) -> float:
    """Shoelace signed area; positive for counter-clockwise rings."""
    acc = 0.0
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def area(polygon: list[Point]) -> float:
    return abs(signed_area(polygon))


def perimeter(polygon: list[Point]) -> float:
    """Total edge length of the closed ring."""
    acc = 0.0
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        acc += float(np.hypot(x2 - x1, y2 - y1))
    return acc


def centroid(polygon: list[Point]) -> Point:
    """Area centroid of the ring (falls back to vertex mean for zero area)."""
    a = signed_area(polygon)
    if a == 0.0:
        xs = [p[0] for p in polygon]
        ys = [p[1] for p in polygon]
        return (sum(xs) / len(xs), sum(ys) / len(ys))
    cx = 0.0
    cy = 0.0
    n = len(polygon)
    for i in range(n):
        x1, y1 = polygon[i]
        x2, y2 = polygon[(i + 1) % n]
        cross = x1 * y2 - x2 * y1
        cx += (x1 + x2) * cross
        cy += (y1 + y2) * cross
    return (cx / (6.0 * a), cy / (6.0 * a))


def bounds(polygon: list[Point]) -> tuple[float, float, float, float]:
    """(min_x, min_y, max_x, max_y) of the vertex set."""
    xs = [p[0] for p in polygon]
    ys = [p[1] for p in polygon]
    return (min(xs), min(ys), max(xs), max(ys))


def translate(polygon: list[Point], dx: float, dy: float) -> list[Point]:
    return [(x + dx, y + dy) for x, y in polygon]
