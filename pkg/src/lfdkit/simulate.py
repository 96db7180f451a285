"""Deterministic 2D inspection world: unicycle kinematics, top-view rasterization,
heading-aligned local crops, and on-board visibility queries.

All functions are pure; identical inputs always produce identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import point_segment_distance, segments_intersect, wrap_angle
from .scene import RobotState, pose_collides

LINEAR_SPEED = 0.5  # m/s for Forward/Backward
ANGULAR_SPEED = 0.8  # rad/s for RotateLeft/RotateRight

# Luminance bands for the rasterized top view. Obstacles occupy a band offset
# by their color index so distinct objects stay distinguishable.
BACKGROUND_VALUE = 0.15
WALL_VALUE = 0.35
AREA_VALUE = 0.70
OBSTACLE_BASE_VALUE = 0.42
OBSTACLE_VALUE_STEP = 0.04
ROBOT_BODY_VALUE = 0.88
ROBOT_NOSE_VALUE = 1.0
NOSE_LENGTH = 0.25  # heading marker extends this far past the footprint, meters
NOSE_WIDTH = 0.18


class Action(Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    ROTATE_LEFT = "rotate_left"
    ROTATE_RIGHT = "rotate_right"
    STOP = "stop"


@dataclass(frozen=True)
class ImageGrid:
    """Rasterized view: luminance in [0, 1] plus an integer object-id channel (0 = none)."""

    values: np.ndarray  # float32 (H, W)
    object_ids: np.ndarray  # int32 (H, W)
    meters_per_pixel: float

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


def step(scene, state, action, dt, linear_speed=LINEAR_SPEED, angular_speed=ANGULAR_SPEED):
    """Advance one kinematic step; motion into an obstacle/wall/boundary is rejected.

    Returns (new_state, collided). Rejected steps return the prior pose with
    collided=True. Rotation never collides (the footprint is a disc).
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not isinstance(action, Action):
        raise TypeError(f"action must be an Action, got {action!r}")
    x, y, theta = state.x, state.y, state.theta
    if action is Action.STOP:
        return state, False
    if action in (Action.ROTATE_LEFT, Action.ROTATE_RIGHT):
        sign = 1.0 if action is Action.ROTATE_LEFT else -1.0
        return RobotState(x, y, float(wrap_angle(theta + sign * angular_speed * dt))), False
    sign = 1.0 if action is Action.FORWARD else -1.0
    nx = x + sign * linear_speed * dt * math.cos(theta)
    ny = y + sign * linear_speed * dt * math.sin(theta)
    if pose_collides(scene, nx, ny):
        return state, True
    return RobotState(nx, ny, theta), False


def _pixel_centers(scene, height, width):
    """World coordinates of pixel centers; row 0 is the top (max y)."""
    mpp = scene.meters_per_pixel
    x0, _, _, y1 = scene.bounds
    cols = x0 + (np.arange(width) + 0.5) * mpp
    rows = y1 - (np.arange(height) + 0.5) * mpp
    return np.meshgrid(cols, rows)


def world_to_pixel(scene, x, y, height=None, width=None):
    """Map world coordinates to (row, col) on the top-view raster (may be out of range)."""
    mpp = scene.meters_per_pixel
    x0, _, _, y1 = scene.bounds
    col = int(math.floor((x - x0) / mpp))
    row = int(math.floor((y1 - y) / mpp))
    return row, col


def render_size(scene):
    mpp = scene.meters_per_pixel
    return (int(round(scene.height / mpp)), int(round(scene.width / mpp)))


def render_topview(scene, state=None):
    """Rasterize the scene (and robot, if a state is given) to an ImageGrid.

    Draw order: background, areas, walls, obstacles, robot body, heading nose.
    """
    height, width = render_size(scene)
    px, py = _pixel_centers(scene, height, width)
    values = np.full((height, width), BACKGROUND_VALUE, dtype=np.float32)
    ids = np.zeros((height, width), dtype=np.int32)

    for ar in scene.areas:
        mask = (px - ar.center[0]) ** 2 + (py - ar.center[1]) ** 2 <= ar.radius**2
        values[mask] = AREA_VALUE

    for w in scene.walls:
        half = w.thickness / 2.0
        ax, ay = w.a
        bx, by = w.b
        ab = np.array([bx - ax, by - ay])
        denom = float(ab @ ab)
        if denom == 0.0:
            mask = (px - ax) ** 2 + (py - ay) ** 2 <= half**2
        else:
            t = np.clip(((px - ax) * ab[0] + (py - ay) * ab[1]) / denom, 0.0, 1.0)
            qx = ax + t * ab[0]
            qy = ay + t * ab[1]
            mask = (px - qx) ** 2 + (py - qy) ** 2 <= half**2
        values[mask] = WALL_VALUE

    for ob in scene.obstacles:
        if ob.kind == "circle":
            mask = (px - ob.center[0]) ** 2 + (py - ob.center[1]) ** 2 <= ob.extent[0] ** 2
        else:
            hw, hh = ob.extent[0] / 2.0, ob.extent[1] / 2.0
            mask = (np.abs(px - ob.center[0]) <= hw) & (np.abs(py - ob.center[1]) <= hh)
        values[mask] = min(OBSTACLE_BASE_VALUE + OBSTACLE_VALUE_STEP * ob.color_index, 0.62)
        ids[mask] = ob.object_id

    if state is not None:
        r = scene.robot_radius
        mask = (px - state.x) ** 2 + (py - state.y) ** 2 <= r**2
        values[mask] = ROBOT_BODY_VALUE
        # Heading nose: a narrow bar from the center past the rim.
        c, s = math.cos(state.theta), math.sin(state.theta)
        relx = px - state.x
        rely = py - state.y
        along = relx * c + rely * s
        across = -relx * s + rely * c
        nose = (along >= 0.0) & (along <= r + NOSE_LENGTH) & (np.abs(across) <= NOSE_WIDTH / 2.0)
        values[nose] = ROBOT_NOSE_VALUE

    return ImageGrid(values=values, object_ids=ids, meters_per_pixel=scene.meters_per_pixel)


def crop_local(image, scene, state, side=100):
    """Heading-aligned square crop centered on the robot.

    The robot maps to the central pixel and its heading points up (toward row
    0). Out-of-scene samples take the background value. Nearest-neighbor
    sampling keeps the object-id channel exact.
    """
    if side <= 0 or side % 2 != 0:
        raise ValueError(f"side must be a positive even pixel count, got {side}")
    mpp = image.meters_per_pixel
    half = side // 2
    # Crop-frame offsets in meters: +u right of robot, +v ahead of robot.
    u = (np.arange(side) - half + 0.5) * mpp
    v = (half - np.arange(side) - 0.5) * mpp
    uu, vv = np.meshgrid(u, v)
    c, s = math.cos(state.theta), math.sin(state.theta)
    # Ahead (v) is the heading axis; right (u) is heading rotated -90 deg.
    wx = state.x + vv * c + uu * s
    wy = state.y + vv * s - uu * c
    x0, _, _, y1 = scene.bounds
    col = np.floor((wx - x0) / mpp).astype(np.int64)
    row = np.floor((y1 - wy) / mpp).astype(np.int64)
    inside = (row >= 0) & (row < image.height) & (col >= 0) & (col < image.width)
    values = np.full((side, side), BACKGROUND_VALUE, dtype=np.float32)
    ids = np.zeros((side, side), dtype=np.int32)
    values[inside] = image.values[row[inside], col[inside]]
    ids[inside] = image.object_ids[row[inside], col[inside]]
    return ImageGrid(values=values, object_ids=ids, meters_per_pixel=mpp)


def visible_objects(scene, state, fov=math.pi / 2.0, view_range=8.0):
    """Ids of obstacles in the on-board camera's field of view.

    An obstacle is visible when its nearest point is within range, within
    +-fov/2 of the heading, and the sight line to that point is not blocked
    by a wall segment.
    """
    out = []
    origin = (state.x, state.y)
    for ob in scene.obstacles:
        target = ob.nearest_point(origin)
        dx, dy = target[0] - state.x, target[1] - state.y
        dist = math.hypot(dx, dy)
        if dist > view_range:
            continue
        if dist > 1e-9:
            bearing = wrap_angle(math.atan2(dy, dx) - state.theta)
            if abs(bearing) > fov / 2.0:
                continue
        occluded = any(
            segments_intersect(origin, target, w.a, w.b) for w in scene.walls
        )
        if not occluded:
            out.append(ob.object_id)
    return out
