"""Central finite-difference verification of the analytic gradients."""

from __future__ import annotations

import numpy as np

from .model import Model, mse_loss


def grad_check(model, sample, epsilon=1e-4, seed=0, fraction=0.01, min_coords=8):
    """Max relative error between analytic and central-difference gradients.

    Checks a seeded random subsample of coordinates per parameter array.
    Coordinates whose +-epsilon perturbation flips any relu pre-activation
    sign are excluded (the loss is non-differentiable across the kink).
    The check runs on a float64 copy of the model; float32 has too little
    precision for central differences at this step size.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-6, 1e-3], got {epsilon}")
    if model.dtype != np.float64:
        copy = Model(model.spec, seed=model.seed, dtype=np.float64)
        copy.set_params([p.astype(np.float64) for p in model.params()])
        model = copy
    images = sample["images"]
    aux = sample.get("aux")
    targets = sample["targets"]

    pred = model.forward(images, aux, train=False)
    _, dpred = mse_loss(pred, targets)
    model.backward(dpred)
    analytic = [g.copy() for g in model.grads()]
    params = model.params()

    def loss_and_signs():
        p = model.forward(images, aux, train=False)
        loss, _ = mse_loss(p, targets)
        return loss, model.relu_signs()

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for p, g in zip(params, analytic):
        size = p.size
        n_check = max(min(min_coords, size), int(round(size * fraction)))
        coords = rng.choice(size, size=min(n_check, size), replace=False)
        flat = p.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            lp, signs_p = loss_and_signs()
            flat[c] = orig - epsilon
            lm, signs_m = loss_and_signs()
            flat[c] = orig
            crossed = any(
                not np.array_equal(sp, sm) for sp, sm in zip(signs_p, signs_m)
            )
            if crossed:
                continue
            fd = (lp - lm) / (2.0 * epsilon)
            a = g.reshape(-1)[c]
            denom = max(abs(a) + abs(fd), 1e-8)
            rel = abs(a - fd) / denom
            max_rel = max(max_rel, rel)
    return max_rel
