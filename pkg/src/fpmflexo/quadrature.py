"""Integration points for subdomains and segments.

Level 1 uses the host point of each subdomain and the midpoint of each
segment.  Level 2 integrates quadratics exactly over any simple polygon (fan
of signed triangles) and cubics along segments (two-point Gauss).
"""
from __future__ import annotations

import numpy as np

LEVELS = (1, 2)

_TRI = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
_GAUSS = 0.5 * np.array([1 - 1 / np.sqrt(3), 1 + 1 / np.sqrt(3)])


def check_level(level: int) -> int:
    if level not in LEVELS:
        raise ValueError(f"quadrature level must be one of {LEVELS}, got {level}")
    return level


def cell_rule(polygon: np.ndarray, host: np.ndarray, area: float, level: int = 1):
    """Points (k, 2) and weights (k,) on a subdomain."""
    if level == 1:
        return np.asarray(host, dtype=float)[None], np.array([area])
    poly = np.asarray(polygon, dtype=float)
    p0 = poly[0]
    pts, wts = [], []
    for k in range(1, len(poly) - 1):
        p1, p2 = poly[k], poly[k + 1]
        d = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if d == 0.0:
            continue
        pts.append(_TRI @ np.array([p0, p1, p2]))
        wts.append(np.full(3, d / 6.0))
    return np.vstack(pts), np.concatenate(wts)


def segment_rule(a: np.ndarray, b: np.ndarray, length: float, level: int = 1):
    """Points (k, 2) and weights (k,) on a straight segment."""
    if level == 1:
        return (0.5 * (a + b))[None], np.array([length])
    t = _GAUSS[:, None]
    return (1 - t) * a + t * b, np.full(2, 0.5 * length)
