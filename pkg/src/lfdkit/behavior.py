"""Per-transition behavioral predictors and autonomous program execution.

Goal-labeled demonstration segments become supervised datasets (heading-
aligned local crop + body-frame velocity -> future waypoints); one network is
trained per transition label. At run time the active network's predicted
waypoint is tracked by a bang-bang heading/advance rule, replanning every
step, switching controllers on goal arrival.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .geometry import body_to_world, world_to_body, wrap_angle
from .program import Cond, Execute, PalindromeLoop, Repeat, Seq, flatten
from .scene import RobotState
from .simulate import Action, crop_local, render_topview, visible_objects
from .traces import TICK_DT, get_crop, paint_robot

WAYPOINT_HORIZONS = (10, 20, 30, 50)  # steps ahead encoded in the target vector
LIBRARY_FORMAT_VERSION = 1


def behavior_spec(crop_side=100):
    """Three 3-filter conv layers (7, 5, 3 kernels, relu) with dropout 0.5 on
    the extracted features, then a dense layer whose output is concatenated
    with the pose/velocity input and mapped linearly to the 10-vector of
    future waypoints. Dropout sits after the conv block: zeroing half of a
    3-channel feature map at every conv starves the visual path entirely and
    the net degenerates to velocity dead reckoning."""
    return nnet.ModelSpec(
        input_shape=(crop_side, crop_side, 1),
        aux_dim=3,
        layers=(
            nnet.Conv(3, 7),
            nnet.Conv(3, 5),
            nnet.Conv(3, 3),
            nnet.Flatten(),
            nnet.Dropout(0.5),
            nnet.Dense(64, "relu"),
            nnet.ConcatAux(),
            nnet.Dense(10, "linear"),
        ),
    )


def encode_targets(states, t, horizons=WAYPOINT_HORIZONS, clamp_at=None):
    """Future waypoints in the heading-aligned frame at step t.

    Returns the 10-vector: (dx, dy) body-frame at each horizon plus
    (sin, cos) of the heading change at the final horizon. Horizons beyond
    clamp_at (exclusive) are clamped to the last available state.
    """
    n = len(states) if clamp_at is None else min(clamp_at, len(states))
    x, y, theta = states[t]
    out = np.empty(10)
    for i, h in enumerate(horizons):
        j = min(t + h, n - 1)
        delta = world_to_body(states[j, :2] - (x, y), theta)
        out[2 * i : 2 * i + 2] = delta
    j = min(t + horizons[-1], n - 1)
    dtheta = wrap_angle(states[j, 2] - theta)
    out[8] = math.sin(dtheta)
    out[9] = math.cos(dtheta)
    return out


def decode_waypoints(vector, state):
    """World-frame waypoints and final heading from a prediction vector."""
    vector = np.asarray(vector, dtype=float)
    points = []
    for i in range(len(WAYPOINT_HORIZONS)):
        delta = body_to_world(vector[2 * i : 2 * i + 2], state.theta)
        points.append((state.x + delta[0], state.y + delta[1]))
    s, c = vector[8], vector[9]
    norm = math.hypot(s, c)
    if norm < 1e-9:
        final_theta = state.theta
    else:
        final_theta = wrap_angle(state.theta + math.atan2(s / norm, c / norm))
    return points, float(final_theta)


def body_velocity(u, theta):
    """(forward, lateral, yaw rate) from a world-frame velocity triple."""
    planar = world_to_body(np.asarray(u[:2], dtype=float), theta)
    return np.array([planar[0], planar[1], u[2]])


def build_dataset(traces, labels_per_trace, scenes, crop_side=100):
    """Per-transition training sets from goal-labeled traces.

    A labeled step contributes a sample when at least the longest horizon
    remains inside its segment; segments shorter than that contribute clamped
    samples for the horizons that fit. Inputs are the step's heading-aligned
    crop and body-frame velocity; targets come from the ground-truth future.
    """
    longest = WAYPOINT_HORIZONS[-1]
    buckets = {}
    for trace, labels, scene in zip(traces, labels_per_trace, scenes):
        states = trace.states
        velocities = trace.velocities
        for seg in labels:
            key = (seg.from_goal, seg.to_goal)
            bucket = buckets.setdefault(
                key, {"images": [], "aux": [], "targets": [], "near_object": []}
            )
            s, e = seg.step_range
            short = (e - s) <= longest
            for t in range(s, e):
                if not short and t + longest >= e:
                    break
                crop = get_crop(trace, t, scene, side=crop_side)
                bucket["images"].append(crop[..., None])
                bucket["aux"].append(body_velocity(velocities[t], states[t, 2]))
                bucket["targets"].append(encode_targets(states, t, clamp_at=e))
                bucket["near_object"].append(
                    any(
                        ob.distance_to((states[t, 0], states[t, 1])) < 3.5
                        for ob in scene.obstacles
                    )
                )
    datasets = {}
    for key, b in buckets.items():
        if not b["images"]:
            warnings.warn(f"transition {key} produced no samples")
            continue
        datasets[key] = {
            "images": np.asarray(b["images"], dtype=np.float32),
            "aux": np.asarray(b["aux"], dtype=np.float32),
            "targets": np.asarray(b["targets"], dtype=np.float32),
            "near_object": np.asarray(b["near_object"], dtype=bool),
        }
    return datasets


class BehaviorModel:
    """Waypoint predictor for one goal transition.

    Crops are centered on the background intensity; targets are standardized
    per output dimension before training (small-scale dimensions such as the
    near-horizon lateral corrections would otherwise be drowned out by the
    far-horizon meters and the net would collapse to dead reckoning).
    predict() takes raw [0, 1] crops and returns the meter-scale vector.
    """

    INPUT_OFFSET = 0.15

    def __init__(self, transition, crop_side=100, lr=0.02, epochs=30, batch_size=32, seed=0,
                 max_samples=None):
        self.transition = tuple(transition)
        self.crop_side = crop_side
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.max_samples = max_samples

    def fit(self, dataset):
        n = len(dataset["images"])
        if self.max_samples and n > self.max_samples:
            # Stratified subsampling: keep every obstacle-proximal sample
            # (avoidance maneuvers are rare but must stay represented), fill
            # the budget with a uniform draw from the rest.
            rng = np.random.default_rng(self.seed)
            near = dataset.get("near_object")
            if near is not None and near.any():
                keep_idx = np.flatnonzero(near)
                rest = np.flatnonzero(~near)
                budget = max(self.max_samples - len(keep_idx), 0)
                fill = rng.choice(rest, size=min(budget, len(rest)), replace=False)
                keep = np.sort(np.concatenate([keep_idx, fill]))
            else:
                keep = rng.choice(n, size=self.max_samples, replace=False)
            dataset = {k: v[keep] for k, v in dataset.items() if v is not None}
        targets = dataset["targets"].astype(np.float64)
        self.target_mean_ = targets.mean(axis=0)
        self.target_scale_ = np.maximum(targets.std(axis=0), 0.02)
        dataset = {
            "images": dataset["images"] - self.INPUT_OFFSET,
            "aux": dataset["aux"],
            "targets": ((targets - self.target_mean_) / self.target_scale_).astype(np.float32),
        }
        config = nnet.TrainConfig(
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed
        )
        self.model_, self.history_ = nnet.train(behavior_spec(self.crop_side), dataset, config)
        self.model_.metadata["target_mean"] = [float(v) for v in self.target_mean_]
        self.model_.metadata["target_scale"] = [float(v) for v in self.target_scale_]
        self.heldout_loss_ = (
            self.history_["holdout_loss"][-1] if self.history_["holdout_loss"] else None
        )
        return self

    def predict(self, crop, aux):
        """Meter-scale prediction vector(s) for raw crop(s) with aux velocity input.

        Accepts a single (H, W) crop or a batch (B, H, W); channel axis added.
        """
        crop = np.asarray(crop, dtype=np.float32) - self.INPUT_OFFSET
        if crop.ndim in (2, 3):
            crop = crop[..., None]
        out = self.model_.forward(crop, np.asarray(aux, dtype=np.float32), train=False)
        return out * self.target_scale_ + self.target_mean_


class ControllerLibrary:
    """Trained behavior models keyed by (from_goal, to_goal)."""

    def __init__(self, models=None, goal_centroids=None):
        self.models = dict(models or {})
        self.goal_centroids = dict(goal_centroids or {})

    def has_transition(self, from_goal, to_goal):
        return (from_goal, to_goal) in self.models

    def transitions(self):
        return sorted(self.models.keys())

    def get(self, transition):
        if transition not in self.models:
            raise KeyError(f"no behavior model for transition {transition}")
        return self.models[transition]

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        index = {
            "format_version": LIBRARY_FORMAT_VERSION,
            "transitions": [],
            "goal_centroids": {str(k): list(v) for k, v in self.goal_centroids.items()},
        }
        for (a, b), model in sorted(self.models.items()):
            fname = f"model_{a}_to_{b}.bin"
            nnet.save_model(model.model_, os.path.join(directory, fname),
                            metadata={"transition": [a, b], "crop_side": model.crop_side})
            index["transitions"].append({"from": a, "to": b, "file": fname})
        with open(os.path.join(directory, "index.json"), "w") as fh:
            json.dump(index, fh, indent=2)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "index.json")) as fh:
            index = json.load(fh)
        if index.get("format_version") != LIBRARY_FORMAT_VERSION:
            raise ValueError(f"unsupported library format_version {index.get('format_version')}")
        models = {}
        for entry in index["transitions"]:
            key = (entry["from"], entry["to"])
            bm = BehaviorModel(key)
            bm.model_ = nnet.load_model(os.path.join(directory, entry["file"]))
            bm.crop_side = bm.model_.metadata.get("crop_side", 100)
            bm.target_mean_ = np.array(bm.model_.metadata["target_mean"])
            bm.target_scale_ = np.array(bm.model_.metadata["target_scale"])
            models[key] = bm
        centroids = {
            int(k): tuple(v) for k, v in index.get("goal_centroids", {}).items()
        }
        return cls(models, centroids)


def train_behavior_models(datasets, goal_centroids=None, epochs=30, lr=2e-3, seed=0,
                          max_samples=None):
    """One BehaviorModel per transition label; divergence aborts propagate."""
    models = {}
    for key in sorted(datasets.keys()):
        bm = BehaviorModel(key, epochs=epochs, lr=lr, seed=seed, max_samples=max_samples)
        bm.fit(datasets[key])
        models[key] = bm
    return ControllerLibrary(models, goal_centroids)


@dataclass(frozen=True)
class MPCConfig:
    track_index: int = 2  # waypoint horizon to track (2 -> the 30-step point)
    # Bearing-error hysteresis for the rotate/advance rule: start rotating
    # above heading_tolerance, keep rotating until within heading_settle.
    # A single threshold either locks drift in (if coarse) or dithers against
    # the 0.08 rad rotation quantum (if fine).
    heading_tolerance: float = 0.09
    heading_settle: float = 0.045
    arrival_radius: float = 0.6
    step_budget: int = 1200
    # Bearing-trim rule: while cruising far from the goal with no obstacle
    # near, keep the heading trimmed to the goal bearing. Demonstration
    # segments only cover a narrow lateral envelope around the demonstrated
    # lanes, so untrimmed heading quantization error compounds into states
    # the predictor never saw. Near obstacles and on final approach the
    # model's predictions take over untrimmed.
    orient_tolerance: float = 0.1
    trim_range: float = 3.0  # goal distance beyond which trimming applies
    kick_steps: int = 6  # forced advance steps right after the start alignment
    # Suspend trimming with an obstacle this close: demonstrations leave the
    # lane well before an obstacle (detour via points), so the model must own
    # the whole approach-swing-return arc, not just the last meters.
    obstacle_standoff: float = 4.5
    obstacle_fov: float = 3.5  # radians; obstacles anywhere but dead astern count
    # PID placeholders: only the proportional heading/advance rule is active.
    k_theta: float = 1.0
    k_v: float = 1.0


class ControllerFault(RuntimeError):
    pass


def mpc_step(model, scene, state, velocity_u, cfg=MPCConfig(), base_image=None, tracker=None):
    """One model-predictive step: predict waypoints from the current crop and
    velocity, then rotate toward the tracked waypoint or advance.

    `tracker` is a mutable dict carrying the hysteresis state across steps
    (rotating flag and a just-rotated latch that forces an advance between
    corrections, so small corrections arc instead of dithering in place).
    Returns (action, waypoints_world, final_heading).
    """
    if base_image is None:
        base_image = render_topview(scene)
    if tracker is None:
        tracker = {}
    img = paint_robot(base_image, scene, state)
    crop = crop_local(img, scene, state, side=model.crop_side)
    aux = body_velocity(velocity_u, state.theta)
    pred = model.predict(crop.values, aux)
    if not np.all(np.isfinite(pred)):
        raise ControllerFault(f"non-finite prediction at state {state}")
    waypoints, final_theta = decode_waypoints(pred, state)
    tx, ty = waypoints[cfg.track_index]
    dx, dy = tx - state.x, ty - state.y
    if math.hypot(dx, dy) < 0.02:
        return Action.STOP, waypoints, final_theta
    bearing = wrap_angle(math.atan2(dy, dx) - state.theta)
    rotating = tracker.get("rotating", False)
    just_rotated = tracker.get("just_rotated", False)
    threshold = cfg.heading_settle if rotating else cfg.heading_tolerance
    if abs(bearing) > threshold and (not just_rotated or abs(bearing) > 0.35):
        action = Action.ROTATE_LEFT if bearing > 0 else Action.ROTATE_RIGHT
        tracker["rotating"] = True
        tracker["just_rotated"] = True
    else:
        action = Action.FORWARD
        tracker["rotating"] = False
        tracker["just_rotated"] = False
    return action, waypoints, final_theta


@dataclass
class ControllerOutcome:
    transition: tuple
    arrived: bool
    steps: int
    final_distance: float


@dataclass
class ExecutionRecord:
    steps: list  # dicts: t, x, y, theta, action, controller, waypoints
    outcomes: list
    success: bool
    collisions: int
    failure_reason: str | None = None

    def save(self, path):
        with open(path, "w") as fh:
            header = {
                "format_version": 1,
                "success": self.success,
                "collisions": self.collisions,
                "failure_reason": self.failure_reason,
                "outcomes": [
                    {
                        "transition": list(o.transition),
                        "arrived": o.arrived,
                        "steps": o.steps,
                        "final_distance": o.final_distance,
                    }
                    for o in self.outcomes
                ],
                "n_steps": len(self.steps),
            }
            fh.write(json.dumps(header) + "\n")
            for s in self.steps:
                fh.write(json.dumps(s) + "\n")


class _Timer:
    """Execution context for conditional predicates (steps since program start)."""

    def __init__(self):
        self.total_steps = 0

    def predicates(self):
        return {"timer_exceeds": lambda threshold: self.total_steps > threshold}


class _BreakSignal(Exception):
    pass


def run_program(program, library, scene, start, cfg=MPCConfig(), start_goal=None, seed=None):
    """Execute a program autonomously with per-transition MPC controllers.

    Each Execute drives to its goal's centroid until within the arrival
    radius or the step budget runs out; conditionals are evaluated at
    controller boundaries; Break exits the innermost Repeat. With a seed the
    start pose is perturbed slightly (robustness probing across seeds).
    """
    from .program import validate

    state = start
    if seed is not None:
        rng = np.random.default_rng(seed)
        state = RobotState(
            start.x + rng.uniform(-0.15, 0.15),
            start.y + rng.uniform(-0.15, 0.15),
            float(wrap_angle(start.theta + rng.uniform(-0.4, 0.4))),
        )
    if start_goal is None:
        start_goal = _nearest_goal(library.goal_centroids, state)
    violations = validate(program, start_goal, library)
    if violations:
        raise ValueError("program failed validation: " + "; ".join(str(v) for v in violations))

    base_image = render_topview(scene)
    timer = _Timer()
    record = ExecutionRecord(steps=[], outcomes=[], success=True, collisions=0)
    ctx = {
        "state": state,
        "prev_state": state,
        "goal": start_goal,
        "t": 0,
    }

    def run_node(node):
        if isinstance(node, Execute):
            _run_controller(node.goal, ctx, library, scene, cfg, base_image, timer, record)
            return
        if isinstance(node, Seq):
            for child in node.children:
                run_node(child)
            return
        if isinstance(node, PalindromeLoop):
            for goal in flatten(node):
                _run_controller(goal, ctx, library, scene, cfg, base_image, timer, record)
            return
        if isinstance(node, Repeat):
            try:
                for _ in range(node.count):
                    run_node(node.body)
            except _BreakSignal:
                pass
            return
        if isinstance(node, Cond):
            predicate = timer.predicates().get(node.predicate)
            if predicate is None:
                raise ValueError(f"unknown predicate {node.predicate!r}")
            if predicate(node.argument):
                for child in node.then:
                    run_node(child)
                if node.break_after:
                    raise _BreakSignal()
            return
        raise TypeError(f"unknown node {node!r}")

    try:
        run_node(program)
    except ControllerFault as fault:
        record.success = False
        record.failure_reason = str(fault)
    return record


def _nearest_goal(centroids, state):
    if not centroids:
        raise ValueError("library has no goal centroids")
    return min(centroids, key=lambda g: math.hypot(centroids[g][0] - state.x, centroids[g][1] - state.y))


def _run_controller(goal, ctx, library, scene, cfg, base_image, timer, record):
    from .simulate import step as sim_step

    transition = (ctx["goal"], goal)
    target = library.goal_centroids[goal]
    state = ctx["state"]
    prev = ctx["prev_state"]
    arrived = math.hypot(target[0] - state.x, target[1] - state.y) <= cfg.arrival_radius
    if not library.has_transition(*transition):
        if transition[0] == transition[1] and arrived:
            # Executing the goal the robot already occupies: an arrival no-op.
            record.outcomes.append(ControllerOutcome(transition, True, 0, 0.0))
            ctx["goal"] = goal
            return
        raise ControllerFault(f"no behavior model for transition {transition}")
    model = library.get(transition)
    steps = 0
    aligned_once = False
    kick_left = 0
    tracker = {}
    while not arrived and steps < cfg.step_budget:
        u = (
            (state.x - prev.x) / TICK_DT,
            (state.y - prev.y) / TICK_DT,
            float(wrap_angle(state.theta - prev.theta)) / TICK_DT,
        )
        goal_dist = math.hypot(target[0] - state.x, target[1] - state.y)
        bearing = wrap_angle(math.atan2(target[1] - state.y, target[0] - state.x) - state.theta)
        if not aligned_once and abs(bearing) <= cfg.orient_tolerance:
            aligned_once = True
            kick_left = cfg.kick_steps
        obstacle_near = bool(
            visible_objects(scene, state, fov=cfg.obstacle_fov, view_range=cfg.obstacle_standoff)
        )
        trimming = (not aligned_once) or (goal_dist > cfg.trim_range and not obstacle_near)
        if not aligned_once:
            action = Action.ROTATE_LEFT if bearing > 0 else Action.ROTATE_RIGHT
            waypoints = []
        elif kick_left > 0:
            # Cold start: establish driving velocity before consulting the
            # model (standstill inputs lie outside the demonstrations).
            kick_left -= 1
            action = Action.FORWARD
            waypoints = []
        elif trimming and abs(bearing) > cfg.orient_tolerance:
            action = Action.ROTATE_LEFT if bearing > 0 else Action.ROTATE_RIGHT
            waypoints = []
        else:
            action, waypoints, _ = mpc_step(model, scene, state, u, cfg, base_image, tracker)
            if action is Action.STOP and goal_dist > cfg.arrival_radius:
                # A stalled prediction outside the goal region: creep onward.
                action = (
                    Action.FORWARD
                    if abs(bearing) <= cfg.orient_tolerance or obstacle_near
                    else (Action.ROTATE_LEFT if bearing > 0 else Action.ROTATE_RIGHT)
                )
        new_state, collided = sim_step(scene, state, action, TICK_DT)
        if collided:
            record.collisions += 1
        record.steps.append(
            {
                "t": ctx["t"] * TICK_DT,
                "x": state.x,
                "y": state.y,
                "theta": state.theta,
                "action": action.value,
                "controller": list(transition),
                "waypoints": [[round(px, 4), round(py, 4)] for px, py in waypoints],
            }
        )
        prev = state
        state = new_state
        ctx["t"] += 1
        timer.total_steps += 1
        steps += 1
        arrived = math.hypot(target[0] - state.x, target[1] - state.y) <= cfg.arrival_radius
    ctx["state"] = state
    ctx["prev_state"] = prev
    ctx["goal"] = goal
    final_distance = math.hypot(target[0] - state.x, target[1] - state.y)
    record.outcomes.append(ControllerOutcome(transition, arrived, steps, final_distance))
    if not arrived:
        record.success = False
        record.failure_reason = (
            f"controller {transition} exhausted its budget at "
            f"({state.x:.2f}, {state.y:.2f}), {final_distance:.2f} m from goal {goal}"
        )
        raise ControllerFault(record.failure_reason)


def playback_controllers(goal_sequence, centroids, scene, start, cfg=MPCConfig(), gains=None):
    """Obstacle-blind playback of inferred proportional controllers: drive
    straight toward each goal position in turn (the comparison baseline)."""
    from .simulate import step as sim_step

    state = start
    record = ExecutionRecord(steps=[], outcomes=[], success=True, collisions=0)
    t = 0
    for goal in goal_sequence:
        target = centroids[goal]
        steps = 0
        stuck = 0
        arrived = math.hypot(target[0] - state.x, target[1] - state.y) <= cfg.arrival_radius
        while not arrived and steps < cfg.step_budget:
            dx, dy = target[0] - state.x, target[1] - state.y
            bearing = wrap_angle(math.atan2(dy, dx) - state.theta)
            if abs(bearing) > cfg.heading_tolerance:
                action = Action.ROTATE_LEFT if bearing > 0 else Action.ROTATE_RIGHT
            else:
                action = Action.FORWARD
            new_state, collided = sim_step(scene, state, action, TICK_DT)
            if collided:
                record.collisions += 1
                stuck += 1
                if stuck > 50:
                    break
            else:
                stuck = 0
            record.steps.append(
                {
                    "t": t * TICK_DT,
                    "x": state.x,
                    "y": state.y,
                    "theta": state.theta,
                    "action": action.value,
                    "controller": ["goto", goal],
                    "waypoints": [],
                }
            )
            state = new_state
            t += 1
            steps += 1
            arrived = math.hypot(target[0] - state.x, target[1] - state.y) <= cfg.arrival_radius
        record.outcomes.append(
            ControllerOutcome(("goto", goal), arrived, steps,
                              math.hypot(target[0] - state.x, target[1] - state.y))
        )
        if not arrived:
            record.success = False
            record.failure_reason = f"playback stuck en route to goal {goal}"
            break
    return record
