"""Planar geometry helpers shared across the simulator and inference code."""

from __future__ import annotations

import math

import numpy as np


def wrap_angle(theta):
    """Wrap an angle (scalar or array) to [-pi, pi)."""
    return (np.asarray(theta) + math.pi) % (2.0 * math.pi) - math.pi


def rotate(vec, theta):
    """Rotate 2D vector(s) by theta. vec shape (..., 2)."""
    c, s = math.cos(theta), math.sin(theta)
    v = np.asarray(vec, dtype=float)
    out = np.empty_like(v)
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    return out


def world_to_body(delta, theta):
    """Express world-frame displacement(s) in a frame whose x-axis points along theta."""
    return rotate(delta, -theta)


def body_to_world(delta, theta):
    return rotate(delta, theta)


def point_segment_distance(p, a, b):
    """Distance from point p to segment ab (all 2-vectors)."""
    p = np.asarray(p, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(p - a)))
    t = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    proj = a + t * ab
    return float(np.hypot(*(p - proj)))


def segments_intersect(p1, p2, q1, q2):
    """True if segments p1p2 and q1q2 intersect (touching counts)."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(v) < 1e-12:
            return 0
        return 1 if v > 0 else -1

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
            and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12
        )

    o1 = orient(p1, p2, q1)
    o2 = orient(p1, p2, q2)
    o3 = orient(q1, q2, p1)
    o4 = orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False
