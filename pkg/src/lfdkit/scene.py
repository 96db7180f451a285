"""Scene description for the 2D inspection world, with a versioned YAML file format.

A scene is an axis-aligned rectangular workspace containing rectangular and
circular obstacles (each with an integer object id), labeled circular
inspection areas, and wall segments. The file format is documented in
docs/scene_format.md.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import yaml

from .geometry import point_segment_distance

SCENE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RobotState:
    """Planar pose: position in meters, heading in radians within [-pi, pi)."""

    x: float
    y: float
    theta: float

    def position(self):
        return (self.x, self.y)


@dataclass(frozen=True)
class Obstacle:
    """Axis-aligned box (kind='rect', extent=(w, h)) or disc (kind='circle', extent=(r,))."""

    object_id: int
    kind: str
    center: tuple[float, float]
    extent: tuple[float, ...]
    color_index: int = 0

    def __post_init__(self):
        if self.kind not in ("rect", "circle"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        n = 2 if self.kind == "rect" else 1
        if len(self.extent) != n:
            raise ValueError(f"{self.kind} obstacle needs extent of length {n}")

    def distance_to(self, point):
        """Distance from point to the obstacle boundary (0 inside)."""
        px, py = point
        cx, cy = self.center
        if self.kind == "circle":
            return max(0.0, math.hypot(px - cx, py - cy) - self.extent[0])
        hw, hh = self.extent[0] / 2.0, self.extent[1] / 2.0
        dx = max(abs(px - cx) - hw, 0.0)
        dy = max(abs(py - cy) - hh, 0.0)
        return math.hypot(dx, dy)

    def contains(self, point):
        return self.distance_to(point) == 0.0

    def nearest_point(self, point):
        """Closest point on the obstacle (itself, if point is inside)."""
        px, py = point
        cx, cy = self.center
        if self.kind == "circle":
            d = math.hypot(px - cx, py - cy)
            if d <= self.extent[0] or d == 0.0:
                return (px, py)
            s = self.extent[0] / d
            return (cx + (px - cx) * s, cy + (py - cy) * s)
        hw, hh = self.extent[0] / 2.0, self.extent[1] / 2.0
        qx = min(max(px, cx - hw), cx + hw)
        qy = min(max(py, cy - hh), cy + hh)
        return (qx, qy)


@dataclass(frozen=True)
class InspectionArea:
    label: int
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class Wall:
    """Line-segment wall with a collision thickness."""

    a: tuple[float, float]
    b: tuple[float, float]
    thickness: float = 0.1


@dataclass(frozen=True)
class SceneConfig:
    scene_id: str
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    start_pose: RobotState
    obstacles: tuple[Obstacle, ...] = ()
    areas: tuple[InspectionArea, ...] = ()
    walls: tuple[Wall, ...] = ()
    meters_per_pixel: float = 0.1
    robot_radius: float = 0.4
    format_version: int = SCENE_FORMAT_VERSION

    def __post_init__(self):
        validate_scene(self)

    @property
    def width(self):
        return self.bounds[2] - self.bounds[0]

    @property
    def height(self):
        return self.bounds[3] - self.bounds[1]

    def obstacle_by_id(self, object_id):
        for ob in self.obstacles:
            if ob.object_id == object_id:
                return ob
        raise KeyError(f"no obstacle with id {object_id}")

    def area_by_label(self, label):
        for ar in self.areas:
            if ar.label == label:
                return ar
        raise KeyError(f"no area labeled {label}")

    def with_obstacles(self, obstacles):
        return replace(self, obstacles=tuple(obstacles))


class SceneError(ValueError):
    pass


def pose_in_bounds(scene, x, y, margin=0.0):
    x0, y0, x1, y1 = scene.bounds
    return x0 + margin <= x <= x1 - margin and y0 + margin <= y <= y1 - margin


def pose_collides(scene, x, y, radius=None):
    """True if a robot disc at (x, y) hits any obstacle, wall, or the boundary."""
    r = scene.robot_radius if radius is None else radius
    if not pose_in_bounds(scene, x, y, margin=r):
        return True
    for ob in scene.obstacles:
        if ob.distance_to((x, y)) < r:
            return True
    for w in scene.walls:
        if point_segment_distance((x, y), w.a, w.b) < r + w.thickness / 2.0:
            return True
    return False


def validate_scene(scene):
    x0, y0, x1, y1 = scene.bounds
    if not (x1 > x0 and y1 > y0):
        raise SceneError("bounds must have positive extent")
    if scene.meters_per_pixel <= 0:
        raise SceneError("meters_per_pixel must be positive")
    labels = [a.label for a in scene.areas]
    if len(set(labels)) != len(labels):
        raise SceneError(f"area labels must be distinct, got {labels}")
    for ar in scene.areas:
        for ob in scene.obstacles:
            if ob.contains(ar.center):
                raise SceneError(
                    f"area {ar.label} center lies inside obstacle {ob.object_id}"
                )
    ids = [ob.object_id for ob in scene.obstacles]
    if len(set(ids)) != len(ids):
        raise SceneError(f"obstacle ids must be distinct, got {ids}")
    sp = scene.start_pose
    if not pose_in_bounds(scene, sp.x, sp.y):
        raise SceneError("start_pose outside scene bounds")
    for ob in scene.obstacles:
        if ob.contains((sp.x, sp.y)):
            raise SceneError(f"start_pose inside obstacle {ob.object_id}")
    if not -math.pi <= sp.theta < math.pi:
        raise SceneError("start_pose.theta must be wrapped to [-pi, pi)")


def scene_to_dict(scene):
    return {
        "format_version": scene.format_version,
        "scene_id": scene.scene_id,
        "bounds": list(scene.bounds),
        "meters_per_pixel": scene.meters_per_pixel,
        "robot_radius": scene.robot_radius,
        "start_pose": {
            "x": scene.start_pose.x,
            "y": scene.start_pose.y,
            "theta": scene.start_pose.theta,
        },
        "obstacles": [
            {
                "id": ob.object_id,
                "kind": ob.kind,
                "center": list(ob.center),
                "extent": list(ob.extent),
                "color_index": ob.color_index,
            }
            for ob in scene.obstacles
        ],
        "areas": [
            {"label": ar.label, "center": list(ar.center), "radius": ar.radius}
            for ar in scene.areas
        ],
        "walls": [
            {"a": list(w.a), "b": list(w.b), "thickness": w.thickness}
            for w in scene.walls
        ],
    }


def scene_from_dict(data):
    version = data.get("format_version")
    if version != SCENE_FORMAT_VERSION:
        raise SceneError(
            f"unsupported scene format_version {version!r}, expected {SCENE_FORMAT_VERSION}"
        )
    sp = data["start_pose"]
    return SceneConfig(
        scene_id=data["scene_id"],
        bounds=tuple(float(v) for v in data["bounds"]),
        meters_per_pixel=float(data.get("meters_per_pixel", 0.1)),
        robot_radius=float(data.get("robot_radius", 0.4)),
        start_pose=RobotState(float(sp["x"]), float(sp["y"]), float(sp["theta"])),
        obstacles=tuple(
            Obstacle(
                object_id=int(o["id"]),
                kind=o["kind"],
                center=tuple(float(v) for v in o["center"]),
                extent=tuple(float(v) for v in o["extent"]),
                color_index=int(o.get("color_index", 0)),
            )
            for o in data.get("obstacles", [])
        ),
        areas=tuple(
            InspectionArea(
                label=int(a["label"]),
                center=tuple(float(v) for v in a["center"]),
                radius=float(a["radius"]),
            )
            for a in data.get("areas", [])
        ),
        walls=tuple(
            Wall(
                a=tuple(float(v) for v in w["a"]),
                b=tuple(float(v) for v in w["b"]),
                thickness=float(w.get("thickness", 0.1)),
            )
            for w in data.get("walls", [])
        ),
    )


def save_scene(scene, path):
    with open(path, "w") as fh:
        yaml.safe_dump(scene_to_dict(scene), fh, sort_keys=False)


def load_scene(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise SceneError(f"scene file {path} is not a mapping")
    return scene_from_dict(data)
