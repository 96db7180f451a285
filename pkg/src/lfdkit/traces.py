"""Demonstration traces: 10 Hz recording, persistence, and goal-based segmentation.

Trace files are line-delimited JSON (one step per line, header line first)
with an optional binary sidecar of local crops; see docs/trace_format.md.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle
from .scene import RobotState
from .simulate import Action, crop_local, render_topview

TRACE_FORMAT_VERSION = 1
CROP_SIDECAR_MAGIC = b"LFDC"
TICK_DT = 0.1  # 10 Hz


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class DemoStep:
    t: float
    state: RobotState
    action: Action
    u: tuple[float, float, float]  # (xdot, ydot, thetadot), finite-differenced
    crop_ref: int = -1  # index into the crop sidecar, -1 when not stored
    visible: tuple[int, ...] = ()


@dataclass
class DemoTrace:
    scene_id: str
    steps: list[DemoStep]
    metadata: dict = field(default_factory=dict)
    dt: float = TICK_DT
    crops: np.ndarray | None = None  # (n, side, side) u8 luminance, optional

    def __post_init__(self):
        if not self.steps:
            raise TraceError("a trace must contain at least one step")
        self._arrays = None

    def __len__(self):
        return len(self.steps)

    def _build_arrays(self):
        n = len(self.steps)
        states = np.empty((n, 3))
        u = np.empty((n, 3))
        for i, s in enumerate(self.steps):
            states[i] = (s.state.x, s.state.y, s.state.theta)
            u[i] = s.u
        self._arrays = (states, u)

    @property
    def states(self):
        """(T, 3) array of (x, y, theta)."""
        if self._arrays is None:
            self._build_arrays()
        return self._arrays[0]

    @property
    def velocities(self):
        """(T, 3) array of observed velocities."""
        if self._arrays is None:
            self._build_arrays()
        return self._arrays[1]

    @property
    def positions(self):
        return self.states[:, :2]


@dataclass(frozen=True)
class SegmentLabel:
    from_goal: int
    to_goal: int
    step_range: tuple[int, int]  # [start, end)


def finite_difference_velocities(states, dt):
    """Per-step velocity from consecutive states; final row copies its predecessor."""
    states = np.asarray(states, dtype=float)
    n = len(states)
    u = np.zeros((n, 3))
    if n >= 2:
        diff = states[1:] - states[:-1]
        diff[:, 2] = wrap_angle(diff[:, 2])
        u[:-1] = diff / dt
        u[-1] = u[-2]
    return u


def trace_from_states(scene_id, states, dt=TICK_DT, actions=None, metadata=None):
    """Build a trace directly from a state sequence (used for synthetic fixtures)."""
    states = np.asarray(states, dtype=float)
    u = finite_difference_velocities(states, dt)
    steps = []
    for i in range(len(states)):
        steps.append(
            DemoStep(
                t=i * dt,
                state=RobotState(*states[i]),
                action=actions[i] if actions is not None else Action.STOP,
                u=tuple(u[i]),
            )
        )
    return DemoTrace(scene_id=scene_id, steps=steps, metadata=metadata or {}, dt=dt)


def record(scene, policy, duration, with_crops=False, crop_side=100, metadata=None):
    """Record a demonstration at 10 Hz by running a policy in the simulator.

    `policy` is called as policy(state, tick_index) and must return an Action;
    it may raise StopIteration to end early. Velocities are finite differences
    of consecutive states; the final step copies its predecessor's velocity.
    """
    from .simulate import step as sim_step

    n_ticks = int(round(duration / TICK_DT))
    if n_ticks <= 0:
        raise TraceError("no demonstration input: duration shorter than one tick")
    state = scene.start_pose
    states = [np.array([state.x, state.y, state.theta])]
    actions = []
    crops = [] if with_crops else None
    base = render_topview(scene) if with_crops else None
    for i in range(n_ticks):
        try:
            action = policy(state, i)
        except StopIteration:
            break
        if action is None:
            raise TraceError(f"no demonstration input at tick {i}")
        if with_crops:
            img = paint_robot(base, scene, state)
            crop = crop_local(img, scene, state, side=crop_side)
            crops.append(np.round(crop.values * 255.0).astype(np.uint8))
        actions.append(action)
        state, _ = sim_step(scene, state, action, TICK_DT)
        states.append(np.array([state.x, state.y, state.theta]))
    if not actions:
        raise TraceError("no demonstration input")
    u = finite_difference_velocities(np.array(states), TICK_DT)
    steps = []
    for i, action in enumerate(actions):
        steps.append(
            DemoStep(
                t=i * TICK_DT,
                state=RobotState(*states[i]),
                action=action,
                u=tuple(u[i]),
                crop_ref=i if with_crops else -1,
            )
        )
    meta = dict(metadata or {})
    meta.setdefault("source", "scripted")
    return DemoTrace(
        scene_id=scene.scene_id,
        steps=steps,
        metadata=meta,
        crops=np.stack(crops) if crops else None,
    )


def paint_robot(base_image, scene, state):
    """Copy of a static scene render with the robot painted in (fast path for crops)."""
    from .simulate import (
        NOSE_LENGTH,
        NOSE_WIDTH,
        ROBOT_BODY_VALUE,
        ROBOT_NOSE_VALUE,
        ImageGrid,
    )
    import math

    mpp = base_image.meters_per_pixel
    values = base_image.values.copy()
    x0, _, _, y1 = scene.bounds
    r = scene.robot_radius + NOSE_LENGTH
    row0 = max(0, int((y1 - state.y - r) / mpp) - 1)
    row1 = min(base_image.height, int((y1 - state.y + r) / mpp) + 2)
    col0 = max(0, int((state.x - x0 - r) / mpp) - 1)
    col1 = min(base_image.width, int((state.x - x0 + r) / mpp) + 2)
    if row0 < row1 and col0 < col1:
        cols = x0 + (np.arange(col0, col1) + 0.5) * mpp
        rows = y1 - (np.arange(row0, row1) + 0.5) * mpp
        px, py = np.meshgrid(cols, rows)
        relx = px - state.x
        rely = py - state.y
        body = relx**2 + rely**2 <= scene.robot_radius**2
        c, s = math.cos(state.theta), math.sin(state.theta)
        along = relx * c + rely * s
        across = -relx * s + rely * c
        nose = (along >= 0) & (along <= scene.robot_radius + NOSE_LENGTH) & (
            np.abs(across) <= NOSE_WIDTH / 2.0
        )
        window = values[row0:row1, col0:col1]
        window[body] = ROBOT_BODY_VALUE
        window[nose] = ROBOT_NOSE_VALUE
    return ImageGrid(values=values, object_ids=base_image.object_ids, meters_per_pixel=mpp)


def get_crop(trace, index, scene=None, side=100):
    """Local crop for a step: stored sidecar data if present, else re-rendered.

    Re-rendering is exact because the simulator is deterministic; a scene is
    required in that case.
    """
    s = trace.steps[index]
    if trace.crops is not None and s.crop_ref >= 0:
        return trace.crops[s.crop_ref].astype(np.float32) / 255.0
    if scene is None:
        raise TraceError("trace has no stored crops and no scene was provided")
    base = _static_render(scene)
    img = paint_robot(base, scene, s.state)
    crop = crop_local(img, scene, s.state, side=side)
    return np.round(crop.values * 255.0).astype(np.uint8).astype(np.float32) / 255.0


_RENDER_CACHE = {}


def _static_render(scene):
    key = id(scene)
    cached = _RENDER_CACHE.get(key)
    if cached is None:
        cached = render_topview(scene)
        if len(_RENDER_CACHE) > 16:
            _RENDER_CACHE.clear()
        _RENDER_CACHE[key] = cached
    return cached


def _step_to_record(s):
    return {
        "t": s.t,
        "x": s.state.x,
        "y": s.state.y,
        "theta": s.state.theta,
        "action": s.action.value,
        "u": list(s.u),
        "crop_ref": s.crop_ref,
        "visible": list(s.visible),
    }


def save(trace, path):
    """Persist a trace as header + one JSON record per line, plus a crop sidecar."""
    with open(path, "w") as fh:
        header = {
            "format_version": TRACE_FORMAT_VERSION,
            "scene_id": trace.scene_id,
            "dt": trace.dt,
            "n_steps": len(trace.steps),
            "metadata": trace.metadata,
            "has_crops": trace.crops is not None,
        }
        fh.write(json.dumps(header) + "\n")
        for s in trace.steps:
            fh.write(json.dumps(_step_to_record(s)) + "\n")
    if trace.crops is not None:
        save_crop_sidecar(trace.crops, str(path) + ".crops")


def save_crop_sidecar(crops, path):
    """Sidecar layout: magic, u16 version, u32 count, u16 side, then count
    row-major side*side u8 intensity blocks, all little-endian."""
    crops = np.ascontiguousarray(crops, dtype=np.uint8)
    n, side, side2 = crops.shape
    if side != side2:
        raise TraceError("crops must be square")
    with open(path, "wb") as fh:
        fh.write(CROP_SIDECAR_MAGIC)
        fh.write(struct.pack("<HIH", TRACE_FORMAT_VERSION, n, side))
        fh.write(crops.tobytes())


def load_crop_sidecar(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CROP_SIDECAR_MAGIC:
            raise TraceError(f"{path}: not a crop sidecar (bad magic {magic!r})")
        version, n, side = struct.unpack("<HIH", fh.read(8))
        if version != TRACE_FORMAT_VERSION:
            raise TraceError(f"{path}: unsupported sidecar version {version}")
        data = np.frombuffer(fh.read(n * side * side), dtype=np.uint8)
    if data.size != n * side * side:
        raise TraceError(f"{path}: sidecar truncated")
    return data.reshape(n, side, side).copy()


def load(path):
    import os

    with open(path) as fh:
        header_line = fh.readline()
        if not header_line:
            raise TraceError(f"{path}: empty trace file")
        header = json.loads(header_line)
        version = header.get("format_version")
        if version != TRACE_FORMAT_VERSION:
            raise TraceError(
                f"{path}: unsupported trace format_version {version!r}, "
                f"expected {TRACE_FORMAT_VERSION}"
            )
        steps = []
        for i in range(header["n_steps"]):
            line = fh.readline()
            if not line.strip():
                raise TraceError(
                    f"{path}: truncated after step {i - 1} (expected {header['n_steps']} steps)"
                )
            try:
                rec = json.loads(line)
                steps.append(
                    DemoStep(
                        t=rec["t"],
                        state=RobotState(rec["x"], rec["y"], rec["theta"]),
                        action=Action(rec["action"]),
                        u=tuple(rec["u"]),
                        crop_ref=rec.get("crop_ref", -1),
                        visible=tuple(rec.get("visible", [])),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise TraceError(f"{path}: malformed record at step {i}: {exc}") from exc
    crops = None
    if header.get("has_crops"):
        sidecar = str(path) + ".crops"
        if os.path.exists(sidecar):
            crops = load_crop_sidecar(sidecar)
    return DemoTrace(
        scene_id=header["scene_id"],
        steps=steps,
        metadata=header.get("metadata", {}),
        dt=header.get("dt", TICK_DT),
        crops=crops,
    )


def label_by_goals(trace, visiting_goals, arrival_radius=0.6, allow_u_turn=False):
    """Segment a trace by visits to goal regions.

    A segment opens when the robot exits the arrival radius of the goal it
    last visited and closes (inclusive of the arrival step) on first entry
    into another goal's radius. Re-entering the same goal discards the open
    segment unless allow_u_turn is set and the robot actually traveled
    (beyond twice the radius), in which case an (A, A) segment is emitted.
    Steps before the first goal arrival are unlabeled.
    """
    if not visiting_goals:
        raise ValueError("visiting_goals must be nonempty")
    if arrival_radius <= 0:
        raise ValueError("arrival_radius must be positive")
    pos = trace.positions
    centers = np.array([g.centroid for g in visiting_goals], dtype=float)
    labels = [g.label for g in visiting_goals]
    d = np.linalg.norm(pos[:, None, :] - centers[None, :, :], axis=2)  # (T, G)
    inside = d <= arrival_radius

    segments = []
    current = None  # label index of the goal the robot last visited
    open_start = None
    max_range = 0.0
    for t in range(len(trace)):
        hits = np.flatnonzero(inside[t])
        if current is None:
            if hits.size:
                current = int(hits[0])
            continue
        if open_start is None:
            if not inside[t, current]:
                open_start = t
                max_range = d[t, current]
            continue
        max_range = max(max_range, d[t, current])
        if hits.size == 0:
            continue
        g = int(hits[0])
        if g == current and not (allow_u_turn and max_range > 2.0 * arrival_radius):
            open_start = None  # jitter back into the same goal: discard
            continue
        segments.append(
            SegmentLabel(
                from_goal=labels[current],
                to_goal=labels[g],
                step_range=(open_start, t + 1),
            )
        )
        current = g
        open_start = None
    if not segments and current is None:
        import warnings

        warnings.warn("trace never reaches any visiting goal; empty labeling")
    return segments
