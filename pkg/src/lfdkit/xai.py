"""Post hoc explanations of behavior predictions.

Occlusion analysis slides a robot-sized background patch over the input crop
and scores each placement by how far it displaces the predicted waypoints;
objects whose pixels score high (and are on the on-board camera) explain the
behavior. Counterfactual scene edits re-render and re-predict without
touching the original scene.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .imaging import save_pgm
from .scene import Obstacle, pose_in_bounds
from .simulate import BACKGROUND_VALUE, crop_local, render_topview, visible_objects
from .traces import paint_robot


@dataclass(frozen=True)
class OcclusionConfig:
    """Patch side defaults to the robot footprint diameter in crop pixels;
    stride is half the patch; the fill is the background band."""

    patch: int = 8
    stride: int | None = None
    fill: float = BACKGROUND_VALUE

    def __post_init__(self):
        if self.patch < 2:
            raise ValueError("patch must be at least 2 pixels")
        if self.stride is None:
            object.__setattr__(self, "stride", math.ceil(self.patch / 2))


def patch_placements(size, patch, stride):
    """Top-left corners tiling a size x size image; the final placement is
    clamped to the edge when the stride does not divide evenly."""
    stops = list(range(0, size - patch + 1, stride))
    if stops[-1] != size - patch:
        stops.append(size - patch)
    return stops


def occlusion_sweep(predict_fn, image, patch, stride=None, fill=0.0):
    """Raw per-pixel occlusion scores (max over covering placements).

    predict_fn maps a batch (B, H, W, 1) to predictions (B, D); the score of
    a placement is the Euclidean distance between its prediction and the
    unoccluded baseline.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 3:
        img = img[:, :, 0]
    h, w = img.shape
    if h != w:
        raise ValueError("occlusion sweep expects square inputs")
    stride = stride or math.ceil(patch / 2)
    stops = patch_placements(h, patch, stride)
    baseline = np.asarray(predict_fn(img[None, :, :, None]))[0]

    batch = []
    coords = []
    for r in stops:
        for c in stops:
            patched = img.copy()
            patched[r : r + patch, c : c + patch] = fill
            batch.append(patched[:, :, None])
            coords.append((r, c))
    preds = np.asarray(predict_fn(np.stack(batch)))
    distances = np.linalg.norm(preds - baseline[None, :], axis=1)

    scores = np.zeros((h, w))
    for (r, c), d in zip(coords, distances):
        region = scores[r : r + patch, c : c + patch]
        np.maximum(region, d, out=region)
    return scores


@dataclass(frozen=True)
class HeatMap:
    """Occlusion scores over the crop, divided by their max (all zeros when
    the model is insensitive everywhere)."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if (v < 0).any():
            raise ValueError("heatmap values must be nonnegative")
        peak = v.max()
        if peak > 0 and not np.isclose(peak, 1.0):
            raise ValueError("heatmap must be max-normalized")

    @classmethod
    def from_scores(cls, scores):
        scores = np.asarray(scores, dtype=float)
        peak = scores.max()
        if peak <= 0:
            warnings.warn("degenerate occlusion map: predictions are patch-invariant")
            return cls(np.zeros_like(scores))
        return cls(scores / peak)

    def export_pgm(self, path):
        save_pgm(self.values, path)


def _model_predict_fn(model, aux):
    aux = np.asarray(aux, dtype=np.float32)

    def predict(batch):
        reps = np.repeat(aux[None, :], len(batch), axis=0)
        return model.predict(batch[:, :, :, 0], reps)

    return predict


def occlusion_heatmap(model, crop, pose_aux, config=OcclusionConfig()):
    """Normalized saliency heatmap of a behavior model's prediction over one crop."""
    crop = np.asarray(crop, dtype=np.float32)
    if crop.shape[0] != model.crop_side:
        raise ValueError(
            f"crop side {crop.shape[0]} does not match model contract {model.crop_side}"
        )
    scores = occlusion_sweep(
        _model_predict_fn(model, pose_aux), crop, config.patch, config.stride, config.fill
    )
    return HeatMap.from_scores(scores)


def salient_objects(heatmap, scene, state, threshold=0.8, crop_side=None):
    """Ids of objects whose mean heatmap value over their crop pixels reaches
    the threshold; objects wholly outside the crop are excluded."""
    side = crop_side or heatmap.values.shape[0]
    base = render_topview(scene)
    crop = crop_local(base, scene, state, side=side)
    out = []
    for ob in scene.obstacles:
        mask = crop.object_ids == ob.object_id
        if not mask.any():
            continue
        if float(heatmap.values[mask].mean()) >= threshold:
            out.append(ob.object_id)
    return out


@dataclass(frozen=True)
class Explanation:
    waypoints: list  # world-frame predicted positions
    salient_ids: list  # by occlusion score alone
    visible_ids: list  # on the on-board camera
    final_ids: list  # intersection: the reported explanation
    heatmap: HeatMap


def explain(model, scene, state, velocity_u=(0.0, 0.0, 0.0), threshold=0.8,
            config=OcclusionConfig()):
    """Full explanation: predicted waypoints plus the salient objects that are
    also visible on the on-board camera."""
    from .behavior import body_velocity, decode_waypoints

    base = render_topview(scene)
    img = paint_robot(base, scene, state)
    crop = crop_local(img, scene, state, side=model.crop_side)
    aux = body_velocity(np.asarray(velocity_u, dtype=float), state.theta)
    pred = model.predict(crop.values, aux)
    waypoints, _ = decode_waypoints(pred, state)
    heatmap = occlusion_heatmap(model, crop.values, aux, config)
    salient = salient_objects(heatmap, scene, state, threshold, crop_side=model.crop_side)
    visible = visible_objects(scene, state)
    final = [i for i in salient if i in visible]
    return Explanation(
        waypoints=waypoints,
        salient_ids=salient,
        visible_ids=visible,
        final_ids=final,
        heatmap=heatmap,
    )


# ---------------------------------------------------------------------------
# Counterfactual scene editing


@dataclass(frozen=True)
class AddObject:
    obstacle: Obstacle


@dataclass(frozen=True)
class RemoveObject:
    object_id: int


@dataclass(frozen=True)
class MoveObject:
    object_id: int
    new_center: tuple[float, float]


class EditError(ValueError):
    pass


def apply_edits(scene, edits):
    """A new scene with the edits applied; the original is untouched."""
    obstacles = list(scene.obstacles)
    for edit in edits:
        if isinstance(edit, AddObject):
            ob = edit.obstacle
            if any(o.object_id == ob.object_id for o in obstacles):
                raise EditError(f"add: object id {ob.object_id} already exists")
            if not pose_in_bounds(scene, *ob.center):
                raise EditError(f"add: object {ob.object_id} center outside bounds")
            obstacles.append(ob)
        elif isinstance(edit, RemoveObject):
            matches = [o for o in obstacles if o.object_id == edit.object_id]
            if not matches:
                raise EditError(f"remove: no object with id {edit.object_id}")
            obstacles.remove(matches[0])
        elif isinstance(edit, MoveObject):
            matches = [o for o in obstacles if o.object_id == edit.object_id]
            if not matches:
                raise EditError(f"move: no object with id {edit.object_id}")
            if not pose_in_bounds(scene, *edit.new_center):
                raise EditError(f"move: object {edit.object_id} target outside bounds")
            idx = obstacles.index(matches[0])
            obstacles[idx] = replace(matches[0], center=tuple(edit.new_center))
        else:
            raise EditError(f"unknown edit {edit!r}")
    return scene.with_obstacles(obstacles)


@dataclass(frozen=True)
class CounterfactualResult:
    edited_scene: object
    waypoints: list
    original_waypoints: list
    displacement: float  # of the final-horizon waypoint, meters


def counterfactual(model, scene, state, edits, velocity_u=(0.0, 0.0, 0.0)):
    """Re-predict under hypothetical scene edits.

    Returns the edited scene, the new predicted waypoints, and the Euclidean
    displacement of the final-horizon waypoint against the unedited
    prediction.
    """
    from .behavior import body_velocity, decode_waypoints

    edited = apply_edits(scene, edits)
    aux = body_velocity(np.asarray(velocity_u, dtype=float), state.theta)

    def predict_on(sc):
        img = paint_robot(render_topview(sc), sc, state)
        crop = crop_local(img, sc, state, side=model.crop_side)
        return decode_waypoints(model.predict(crop.values, aux), state)[0]

    original = predict_on(scene)
    new = predict_on(edited)
    displacement = math.hypot(new[-1][0] - original[-1][0], new[-1][1] - original[-1][1])
    return CounterfactualResult(
        edited_scene=edited,
        waypoints=new,
        original_waypoints=original,
        displacement=displacement,
    )
