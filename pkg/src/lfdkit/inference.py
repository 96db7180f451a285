"""Goal and controller inference from demonstration traces.

A particle filter over switching proportional controllers: each particle is a
(goal state, per-dimension gain) hypothesis scored by how well it explains the
observed velocities. Between switches goals drift by Gaussian jitter; at
switches new goals are proposed from the attribution prior. Consensus peaks in
the effective particle size mark settled controllers, whose MAP hypotheses are
clustered into goal areas and classified as visiting or transit goals.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks
from sklearn.base import BaseEstimator
from sklearn.cluster import KMeans

from .geometry import wrap_angle
from .prior import sample_prior

REPORT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class InferenceConfig:
    n_particles: int = 500
    switch_prob: float = 0.5
    q_x: float = 0.01  # goal transition noise variance
    q_kp: float = 0.01  # gain transition noise variance
    r: float = 0.01  # controller noise variance
    seed: int = 0
    gain_init: tuple[float, float] = (-2.0, 0.0)
    # One shared gain draw per particle (diagonal-isotropic start): keeps
    # matched-gain controllers reachable at moderate particle counts. The
    # per-dimension jitter still lets gains differentiate over time.
    gain_init_isotropic: bool = True
    baseline: bool = False  # no attribution prior: uniform goal proposals
    # Resample when N_eff falls below this fraction of N. 1.0 reproduces the
    # unconditional per-step resampling; lower values accumulate weights
    # across steps, preserving parameter diversity on low-noise traces.
    resample_threshold: float = 1.0

    def __post_init__(self):
        if self.n_particles < 10:
            raise ValueError("n_particles must be >= 10")
        if not 0.0 < self.switch_prob < 1.0:
            raise ValueError("switch_prob must be in (0, 1)")
        if min(self.q_x, self.q_kp, self.r) <= 0:
            raise ValueError("noise variances must be positive")


@dataclass(frozen=True)
class ControllerEstimate:
    goal: tuple[float, float, float]
    gains: tuple[float, float, float]
    step_range: tuple[int, int]
    saliency: float | None = None
    goal_class: str | None = None  # 'visiting' | 'transit'


@dataclass(frozen=True)
class GoalCluster:
    cluster_id: int
    label: int  # ordinal by first visit
    centroid: tuple[float, float]
    members: tuple[int, ...]  # indices into the estimate list


@dataclass
class SISResult:
    goals: np.ndarray  # (T, N, 3) float32
    gains: np.ndarray  # (T, N, 3) float32
    weights: np.ndarray  # (T, N) float32, normalized pre-resampling
    neff: np.ndarray  # (T,)
    sentinel_steps: list


def effective_particle_size(weights):
    """N_eff = 1 / sum(w^2) for normalized weights."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not np.isclose(total, 1.0, atol=1e-6):
        raise ValueError(f"weights must be normalized to sum 1, got sum {total}")
    return 1.0 / float((w**2).sum())


def _log_likelihood(u_obs, state, goals, gains, r):
    """Log density of the observed velocity under each particle's controller."""
    diff = state[None, :] - goals
    diff[:, 2] = wrap_angle(diff[:, 2])
    pred = gains * diff
    resid = u_obs[None, :] - pred
    resid[:, 2] = wrap_angle(resid[:, 2])
    return -0.5 * np.sum(resid**2, axis=1) / r


def _normalize_log_weights(logw):
    m = logw.max()
    if not np.isfinite(m):
        return None
    w = np.exp(logw - m)
    return w / w.sum()


def sis_infer(trace, prior, config, bounds=None):
    """Run the filter over a trace; returns per-step particle sets and N_eff.

    Each step: the first floor(p*N) particles continue their controller with
    Gaussian jitter on goal and gains; the rest draw fresh goals from the
    attribution prior (or uniformly over the workspace in baseline mode) with
    jittered gains; all particles are weighted by the Gaussian controller
    likelihood at the observed velocity, N_eff is recorded from the normalized
    weights, and the population is resampled multinomially.
    """
    if len(trace) < 2:
        raise ValueError("trace must have at least 2 steps")
    if config.baseline and bounds is None:
        raise ValueError("baseline mode requires workspace bounds")
    if not config.baseline and prior is None:
        raise ValueError("an attribution prior is required unless baseline=True")

    rng = np.random.default_rng(config.seed)
    n = config.n_particles
    n_cont = int(config.switch_prob * n)
    sd_x, sd_kp = np.sqrt(config.q_x), np.sqrt(config.q_kp)
    states = trace.states
    velocities = trace.velocities
    T = len(trace)

    def fresh_goals(t, count):
        if config.baseline:
            x0, y0, x1, y1 = bounds
            out = np.empty((count, 3))
            out[:, 0] = rng.uniform(x0, x1, size=count)
            out[:, 1] = rng.uniform(y0, y1, size=count)
            out[:, 2] = rng.uniform(-np.pi, np.pi, size=count)
            return out
        return sample_prior(prior, count, rng, t=t)

    goals = fresh_goals(0, n)
    if config.gain_init_isotropic:
        gains = np.repeat(
            rng.uniform(config.gain_init[0], config.gain_init[1], size=(n, 1)), 3, axis=1
        )
    else:
        gains = rng.uniform(config.gain_init[0], config.gain_init[1], size=(n, 3))

    hist_goals = np.empty((T, n, 3), dtype=np.float32)
    hist_gains = np.empty((T, n, 3), dtype=np.float32)
    hist_w = np.empty((T, n), dtype=np.float32)
    neff = np.empty(T)
    sentinel_steps = []
    log_accum = np.zeros(n)

    for t in range(T):
        if t > 0:
            goals[:n_cont] += rng.normal(0.0, sd_x, size=(n_cont, 3))
            goals[:n_cont, 2] = wrap_angle(goals[:n_cont, 2])
            goals[n_cont:] = fresh_goals(t, n - n_cont)
            gains += rng.normal(0.0, sd_kp, size=(n, 3))

        log_accum += _log_likelihood(velocities[t], states[t], goals, gains, config.r)
        w = _normalize_log_weights(log_accum)
        degenerate = w is None
        if degenerate:
            warnings.warn(f"all-zero controller likelihoods at step {t}; uniform resample")
            w = np.full(n, 1.0 / n)
            sentinel_steps.append(t)
            neff[t] = n
        else:
            neff[t] = 1.0 / float((w**2).sum())

        hist_goals[t] = goals
        hist_gains[t] = gains
        hist_w[t] = w

        if degenerate or neff[t] < config.resample_threshold * n:
            idx = rng.choice(n, size=n, p=w)
            goals = goals[idx]
            gains = gains[idx]
            log_accum[:] = 0.0

    return SISResult(hist_goals, hist_gains, hist_w, neff, sentinel_steps)


def detect_switches(neff_series, min_prominence, min_separation=20, smooth_window=5):
    """Peak steps of the effective-particle-size series.

    The series is smoothed with a moving average, then local maxima with the
    given prominence and pairwise separation are returned in step order.
    """
    series = np.asarray(neff_series, dtype=float)
    if len(series) < 3:
        raise ValueError("series must have at least 3 points")
    smoothed = uniform_filter1d(series, size=smooth_window, mode="nearest")
    peaks, _ = find_peaks(smoothed, prominence=min_prominence, distance=min_separation)
    return [int(p) for p in peaks]


def extract_controllers(result, peaks):
    """MAP controller at each consensus peak; activation spans from the
    previous peak (or the trace start)."""
    estimates = []
    prev = 0
    for p in peaks:
        best = int(np.argmax(result.weights[p]))
        estimates.append(
            ControllerEstimate(
                goal=tuple(float(v) for v in result.goals[p, best]),
                gains=tuple(float(v) for v in result.gains[p, best]),
                step_range=(prev, int(p)),
            )
        )
        prev = int(p)
    return estimates


def classify_goals(estimates, field, trace, threshold_quantile=0.7, footprint=0.4):
    """Split estimates into visiting and transit goals by pixel saliency.

    The threshold is the given quantile of the saliency distribution over the
    unique path cells the robot visited. A goal's saliency is read over its
    footprint (max within the robot radius, so arrival jitter at a marker
    edge does not flip the class) and the goal is visiting only when it
    strictly exceeds the threshold: ties count as transit, so a uniform field
    yields no visiting goals.
    """
    pos = trace.positions
    x0, _, _, y1 = field.bounds
    mpp = field.meters_per_pixel
    cells = np.unique(
        np.stack(
            [
                np.floor((y1 - pos[:, 1]) / mpp).astype(int),
                np.floor((pos[:, 0] - x0) / mpp).astype(int),
            ],
            axis=1,
        ),
        axis=0,
    )
    h, w = field.values.shape
    valid = (cells[:, 0] >= 0) & (cells[:, 0] < h) & (cells[:, 1] >= 0) & (cells[:, 1] < w)
    on_path = field.values[cells[valid, 0], cells[valid, 1]]
    threshold = float(np.quantile(on_path, threshold_quantile))
    r = max(1, int(round(footprint / mpp)))
    offsets = np.arange(-r, r + 1) * mpp
    dx, dy = np.meshgrid(offsets, offsets)
    out = []
    for est in estimates:
        s = float(field.value_at(est.goal[0] + dx, est.goal[1] + dy).max())
        cls = "visiting" if s > threshold else "transit"
        out.append(replace(est, saliency=s, goal_class=cls))
    return out


def cluster_goals(estimates, k_max=10, seed=0, elbow_drop=0.15):
    """K-means over planar goal positions with an elbow-chosen cluster count.

    k is the smallest value whose inertia drop to k+1, relative to the total
    (k=1) inertia, falls below the elbow threshold; clusters are labeled
    1..k by first visit along the trace.
    """
    if not estimates:
        raise ValueError("at least one estimate is required")
    pts = np.array([[e.goal[0], e.goal[1]] for e in estimates])
    n = len(pts)
    if n == 1:
        return [GoalCluster(0, 1, (float(pts[0, 0]), float(pts[0, 1])), (0,))]

    k_hi = min(k_max, n)
    fits = {}
    inertia = {}
    for k in range(1, k_hi + 1):
        km = KMeans(n_clusters=k, n_init=20, random_state=seed).fit(pts)
        fits[k] = km
        inertia[k] = km.inertia_
    total = inertia[1]
    chosen = k_hi
    if total <= 1e-12:
        chosen = 1
    else:
        for k in range(1, k_hi):
            drop = (inertia[k] - inertia[k + 1]) / total
            if drop < elbow_drop:
                chosen = k
                break
    km = fits[chosen]

    order = np.argsort([e.step_range[1] for e in estimates])
    label_of_cluster = {}
    next_label = 1
    for i in order:
        c = int(km.labels_[i])
        if c not in label_of_cluster:
            label_of_cluster[c] = next_label
            next_label += 1
    clusters = []
    for c, label in sorted(label_of_cluster.items(), key=lambda kv: kv[1]):
        members = tuple(int(i) for i in np.flatnonzero(km.labels_ == c))
        centroid = km.cluster_centers_[c]
        clusters.append(GoalCluster(c, label, (float(centroid[0]), float(centroid[1])), members))
    return clusters


def goal_sequence(estimates, clusters, indices=None):
    """Cluster labels of the given estimates in time order, consecutive
    duplicates collapsed (adjacent peaks agreeing on a goal are one visit)."""
    label_by_member = {}
    for cl in clusters:
        for m in cl.members:
            label_by_member[m] = cl.label
    if indices is None:
        indices = range(len(estimates))
    ordered = sorted(indices, key=lambda i: estimates[i].step_range[1])
    seq = []
    for i in ordered:
        lab = label_by_member.get(i)
        if lab is None:
            continue
        if not seq or seq[-1] != lab:
            seq.append(lab)
    return seq


class GoalInference(BaseEstimator):
    """Estimator wrapping the full inference pipeline.

    fit(trace, prior=..., bounds=...) populates: neff_, peaks_, estimates_,
    clusters_, sequence_, sis_ (the particle history), and report().
    """

    def __init__(
        self,
        n_particles=500,
        switch_prob=0.5,
        q_x=0.01,
        q_kp=0.01,
        r=0.01,
        seed=0,
        peak_prominence_frac=0.2,
        peak_separation=20,
        peak_smoothing=5,
        threshold_quantile=0.7,
        k_max=10,
        baseline=False,
        resample_threshold=1.0,
    ):
        self.n_particles = n_particles
        self.switch_prob = switch_prob
        self.q_x = q_x
        self.q_kp = q_kp
        self.r = r
        self.seed = seed
        self.peak_prominence_frac = peak_prominence_frac
        self.peak_separation = peak_separation
        self.peak_smoothing = peak_smoothing
        self.threshold_quantile = threshold_quantile
        self.k_max = k_max
        self.baseline = baseline
        self.resample_threshold = resample_threshold

    def config(self):
        return InferenceConfig(
            n_particles=self.n_particles,
            switch_prob=self.switch_prob,
            q_x=self.q_x,
            q_kp=self.q_kp,
            r=self.r,
            seed=self.seed,
            baseline=self.baseline,
            resample_threshold=self.resample_threshold,
        )

    def fit(self, trace, prior=None, bounds=None):
        self.sis_ = sis_infer(trace, prior, self.config(), bounds=bounds)
        neff = self.sis_.neff.copy()
        for t in self.sis_.sentinel_steps:
            neff[t] = neff[t - 1] if t > 0 else neff[t + 1]
        self.neff_ = self.sis_.neff
        self.peaks_ = detect_switches(
            neff,
            min_prominence=self.peak_prominence_frac * self.n_particles,
            min_separation=self.peak_separation,
            smooth_window=self.peak_smoothing,
        )
        # A demonstration that ends settled has no falling edge for the peak
        # detector; read its terminal controller at the final step.
        t_last = len(trace) - 1
        if (not self.peaks_ or t_last - self.peaks_[-1] >= self.peak_separation) and neff[
            t_last
        ] >= np.median(neff):
            self.peaks_ = list(self.peaks_) + [t_last]
        estimates = extract_controllers(self.sis_, self.peaks_)
        if not self.baseline and prior is not None:
            estimates = classify_goals(
                estimates, prior.field, trace, self.threshold_quantile
            )
            visiting = [i for i, e in enumerate(estimates) if e.goal_class == "visiting"]
        else:
            visiting = list(range(len(estimates)))
        self.estimates_ = estimates
        self.visiting_indices_ = visiting
        if visiting:
            self.clusters_ = cluster_goals(
                [estimates[i] for i in visiting], k_max=self.k_max, seed=self.seed
            )
            # cluster members index the visiting subset; remap to estimate indices
            self.clusters_ = [
                replace(c, members=tuple(visiting[m] for m in c.members)) for c in self.clusters_
            ]
        else:
            self.clusters_ = []
        self.sequence_ = goal_sequence(estimates, self.clusters_, visiting)
        return self

    def report(self):
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "config": {
                "n_particles": self.n_particles,
                "switch_prob": self.switch_prob,
                "q_x": self.q_x,
                "q_kp": self.q_kp,
                "r": self.r,
                "seed": self.seed,
                "baseline": self.baseline,
            },
            "neff_series": [float(v) for v in self.neff_],
            "peaks": list(self.peaks_),
            "estimates": [
                {
                    "goal": list(e.goal),
                    "gains": list(e.gains),
                    "step_range": list(e.step_range),
                    "saliency": e.saliency,
                    "class": e.goal_class,
                }
                for e in self.estimates_
            ],
            "clusters": [
                {
                    "cluster_id": c.cluster_id,
                    "label": c.label,
                    "centroid": list(c.centroid),
                    "members": list(c.members),
                }
                for c in self.clusters_
            ],
            "sequence": list(self.sequence_),
        }


def save_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def load_report(path):
    with open(path) as fh:
        report = json.load(fh)
    version = report.get("format_version")
    if version != REPORT_FORMAT_VERSION:
        raise ValueError(f"unsupported report format_version {version!r}")
    return report
