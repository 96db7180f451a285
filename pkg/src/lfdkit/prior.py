"""Attribution prior for goal sampling.

Builds the proposal distribution used by the goal filter: a global position
predictor is trained on demonstration renders, its pixel saliency weights
candidate goals (attractor term), and an inverse-distance-to-path likelihood
suppresses candidates away from where the robot actually drove (repeller
term). Candidates themselves originate from the demonstration's near future.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator

from . import nnet
from .imaging import block_mean, save_pgm
from .traces import paint_robot
from .simulate import render_topview

PATH_CLAMP_DISTANCE = 0.05  # meters; caps the inverse-distance weight at 20


@dataclass(frozen=True)
class SaliencyField:
    """Nonnegative pixel weights over the top view, normalized to sum 1."""

    values: np.ndarray  # (H, W), sum == 1
    bounds: tuple[float, float, float, float]
    meters_per_pixel: float
    method: str  # 'gradient' | 'occlusion' | 'uniform'

    def __post_init__(self):
        total = float(self.values.sum())
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError(f"saliency field must sum to 1, got {total}")
        if (self.values < 0).any():
            raise ValueError("saliency weights must be nonnegative")

    @classmethod
    def from_raw(cls, raw, bounds, meters_per_pixel, method):
        raw = np.asarray(raw, dtype=float)
        raw = np.where(raw > 0, raw, 0.0)
        total = raw.sum()
        if total <= 0:
            warnings.warn(f"degenerate {method} saliency; falling back to uniform")
            raw = np.ones_like(raw)
            total = raw.sum()
            method = "uniform"
        return cls(raw / total, tuple(bounds), meters_per_pixel, method)

    @classmethod
    def uniform(cls, scene, size=64):
        factor = _downsample_factor(scene, size)
        mpp = scene.meters_per_pixel * factor
        return cls.from_raw(np.ones((size, size)), scene.bounds, mpp, "uniform")

    def value_at(self, x, y):
        """Weight(s) at world coordinates; zero outside the field."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x0, _, _, y1 = self.bounds
        col = np.floor((x - x0) / self.meters_per_pixel).astype(int)
        row = np.floor((y1 - y) / self.meters_per_pixel).astype(int)
        h, w = self.values.shape
        inside = (row >= 0) & (row < h) & (col >= 0) & (col < w)
        out = np.zeros(np.broadcast(x, y).shape)
        out[inside] = self.values[row[inside], col[inside]]
        return out

    def export_pgm(self, path):
        save_pgm(self.values, path)


def _downsample_factor(scene, size):
    h = int(round(scene.height / scene.meters_per_pixel))
    w = int(round(scene.width / scene.meters_per_pixel))
    if h != w:
        raise ValueError("position predictor expects square scenes")
    if h % size:
        raise ValueError(f"render size {h} not divisible by predictor input {size}")
    return h // size


def predictor_input(scene, state=None, base_image=None, size=64):
    """Downsampled full top view (robot painted in when a state is given)."""
    if base_image is None:
        base_image = render_topview(scene)
    img = paint_robot(base_image, scene, state) if state is not None else base_image
    factor = _downsample_factor(scene, size)
    return block_mean(img.values.astype(float), factor)[..., None]


class PositionPredictor(BaseEstimator):
    """Conv net mapping the downsampled top view to 5 future robot offsets.

    Targets are the robot's world-frame displacement at 2 s intervals up to
    10 s ahead, in meters; output is the 10-vector (dx1, dy1, ..., dx5, dy5).
    Inputs are centered on the background intensity and targets scaled to
    roughly unit range internally; predict() returns meters.
    """

    HORIZON_STEPS = (20, 40, 60, 80, 100)  # 2 s .. 10 s at 10 Hz
    INPUT_OFFSET = 0.15  # background band; content pixels become nonzero
    TARGET_SCALE = 0.25

    def __init__(
        self,
        input_size=64,
        hidden=64,
        lr=0.05,
        epochs=60,
        batch_size=32,
        seed=0,
        weight_decay=1e-4,
        sample_stride=3,
    ):
        self.input_size = input_size
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.weight_decay = weight_decay
        self.sample_stride = sample_stride

    def spec(self):
        return nnet.ModelSpec(
            input_shape=(self.input_size, self.input_size, 1),
            layers=(
                nnet.Conv(3, 7),
                nnet.Conv(3, 5),
                nnet.Conv(3, 3),
                nnet.Flatten(),
                nnet.Dense(self.hidden, "relu"),
                nnet.Dense(10, "linear"),
            ),
        )

    def build_dataset(self, traces, scenes):
        horizon = self.HORIZON_STEPS[-1]
        images = []
        targets = []
        for trace, scene in zip(traces, scenes):
            n = len(trace)
            if n <= horizon:
                raise ValueError(
                    f"trace on scene {trace.scene_id!r} too short: {n} steps, "
                    f"needs > {horizon} to supply {len(self.HORIZON_STEPS)} future positions"
                )
            base = render_topview(scene)
            pos = trace.positions
            for t in range(0, n - horizon, self.sample_stride):
                images.append(predictor_input(scene, trace.steps[t].state, base, self.input_size))
                rel = pos[[t + h for h in self.HORIZON_STEPS]] - pos[t]
                targets.append(rel.reshape(-1))
        return {
            "images": np.asarray(images, dtype=np.float32) - self.INPUT_OFFSET,
            "targets": np.asarray(targets, dtype=np.float32) * self.TARGET_SCALE,
        }

    def fit(self, traces, scenes):
        dataset = self.build_dataset(traces, scenes)
        config = nnet.TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            weight_decay=self.weight_decay,
        )
        self.model_, self.history_ = nnet.train(self.spec(), dataset, config)
        self.heldout_loss_ = self.history_["holdout_loss"][-1] if self.history_["holdout_loss"] else None
        self.n_samples_ = len(dataset["images"])
        return self

    def predict(self, images):
        """Future offsets in meters for raw [0, 1] top-view image(s)."""
        x = np.asarray(images, dtype=np.float32) - self.INPUT_OFFSET
        return self.model_.forward(x, train=False) / self.TARGET_SCALE

    def is_trained(self):
        model = getattr(self, "model_", None)
        return model is not None and any(np.abs(p).max() > 0 for p in model.params())


def saliency_gradient(predictor, image, bounds):
    """Pixel saliency of a predictor input: L2 norm over the 10 output
    coordinates of d(output)/d(pixel), one backward pass per coordinate,
    normalized to sum 1. An untrained predictor yields a uniform field."""
    size = image.shape[0]
    mpp = (bounds[2] - bounds[0]) / size
    if not predictor.is_trained():
        warnings.warn("untrained position predictor: uniform saliency field")
        return SaliencyField.from_raw(np.ones((size, size)), bounds, mpp, "uniform")
    model = predictor.model_
    model.forward(image[None] - predictor.INPUT_OFFSET, train=False)
    sq = np.zeros((size, size))
    for k in range(10):
        seed_vec = np.zeros((1, 10))
        seed_vec[0, k] = 1.0
        grad = model.backward(seed_vec, need_input_grad=True)
        sq += grad[0, :, :, 0].astype(float) ** 2
    return SaliencyField.from_raw(np.sqrt(sq), bounds, mpp, "gradient")


def saliency_occlusion(predictor, image, bounds, patch=5, stride=None):
    """Occlusion-based alternative: score each patch placement by the
    prediction displacement it causes; per-pixel max over placements."""
    from .xai import occlusion_sweep

    size = image.shape[0]
    mpp = (bounds[2] - bounds[0]) / size
    if not predictor.is_trained():
        warnings.warn("untrained position predictor: uniform saliency field")
        return SaliencyField.from_raw(np.ones((size, size)), bounds, mpp, "uniform")

    def predict(batch):
        return predictor.model_.forward(batch, train=False)

    scores = occlusion_sweep(
        predict, image - predictor.INPUT_OFFSET, patch=patch, stride=stride, fill=0.0
    )
    return SaliencyField.from_raw(scores, bounds, mpp, "occlusion")


def path_likelihood(candidate, trace, t, d_min=PATH_CLAMP_DISTANCE):
    """Inverse distance from a 2D point to the remaining demonstration path.

    weight = 1 / max(d_min, min_{q in [t, T]} ||pos(q) - candidate||), using
    planar position only.
    """
    if t >= len(trace):
        raise ValueError(f"t={t} beyond trace end {len(trace)}")
    future = trace.positions[t:]
    cand = np.asarray(candidate, dtype=float).reshape(1, 2)
    dist = float(cdist(cand, future).min())
    return 1.0 / max(d_min, dist)


@dataclass(frozen=True)
class AttributionPrior:
    """Proposal over candidate goals: near-future trace states, reweighted by
    pixel saliency and by proximity to the demonstrated path."""

    field: SaliencyField
    trace: object
    t: int = 0
    window: int = 100  # lookahead steps (10 s); clipped at the trace end
    proposal_jitter: float = 0.3  # meters; exploration spread around trace states
    d_min: float = PATH_CLAMP_DISTANCE
    use_saliency: bool = True
    use_path: bool = True

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def at_step(self, t):
        return replace(self, t=t)


def _resample(weights, rng):
    total = weights.sum()
    if not np.isfinite(total) or total <= 0:
        warnings.warn("degenerate prior weights; uniform resampling")
        return rng.integers(0, len(weights), size=len(weights))
    return rng.choice(len(weights), size=len(weights), p=weights / total)


def sample_prior(prior, count, rng, t=None):
    """Draw candidate goal states (x, y, theta) from the attribution prior.

    Three stages: (1) uniform draws from the trace states in the lookahead
    window, spread by clipped Gaussian jitter; (2) importance resampling by
    pixel saliency at each candidate; (3) importance resampling by inverse
    distance to the remaining path. Headings are drawn uniformly from the
    window's heading range.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    t = prior.t if t is None else t
    trace = prior.trace
    states = trace.states
    n = len(states)
    hi = min(t + prior.window, n - 1)
    lo = min(t, n - 1)

    idx = rng.integers(lo, hi + 1, size=count)
    candidates = states[idx, :2].copy()
    if prior.proposal_jitter > 0:
        eps = rng.normal(0.0, prior.proposal_jitter, size=(count, 2))
        clip = 3.0 * prior.proposal_jitter
        candidates += np.clip(eps, -clip, clip)

    if prior.use_saliency:
        w_a = prior.field.value_at(candidates[:, 0], candidates[:, 1])
        candidates = candidates[_resample(w_a, rng)]

    if prior.use_path:
        future = trace.positions[lo:]
        dist = cdist(candidates, future).min(axis=1)
        w_b = 1.0 / np.maximum(prior.d_min, dist)
        candidates = candidates[_resample(w_b, rng)]

    headings = np.unwrap(states[lo : hi + 1, 2])
    theta = rng.uniform(headings.min(), headings.max(), size=count)
    theta = (theta + np.pi) % (2 * np.pi) - np.pi
    return np.column_stack([candidates, theta])


def build_attribution_prior(
    trace,
    scene,
    predictor=None,
    method="occlusion",
    window=100,
    proposal_jitter=0.3,
    n_frames=0,
    use_saliency=True,
    use_path=True,
):
    """Construct the prior for a trace.

    With n_frames=0 the field comes from the scene render alone, which keeps
    the robot's own footprint from contaminating it (only scene content
    scores); n_frames>0 instead averages per-frame fields at evenly spaced
    trace states with the robot painted in.
    """
    if predictor is None or not predictor.is_trained():
        field = SaliencyField.uniform(scene)
        return AttributionPrior(
            field=field, trace=trace, window=window, proposal_jitter=proposal_jitter,
            use_saliency=use_saliency, use_path=use_path,
        )

    def field_for(image):
        if method == "gradient":
            return saliency_gradient(predictor, image, scene.bounds)
        if method == "occlusion":
            return saliency_occlusion(predictor, image, scene.bounds)
        raise ValueError(f"unknown saliency method {method!r}")

    if n_frames <= 0:
        field = field_for(predictor_input(scene, state=None, size=predictor.input_size))
    else:
        base = render_topview(scene)
        step_idx = np.linspace(0, len(trace) - 1, min(n_frames, len(trace))).astype(int)
        acc = None
        for i in step_idx:
            img = predictor_input(scene, trace.steps[i].state, base, predictor.input_size)
            acc = field_for(img).values if acc is None else acc + field_for(img).values
        field = SaliencyField.from_raw(
            acc, scene.bounds,
            scene.meters_per_pixel * _downsample_factor(scene, predictor.input_size), method,
        )
    return AttributionPrior(
        field=field, trace=trace, window=window, proposal_jitter=proposal_jitter,
        use_saliency=use_saliency, use_path=use_path,
    )
