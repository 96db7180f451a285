"""SGD-with-momentum training over in-memory datasets.

A dataset is a dict with float arrays: images (N, H, W, C), targets (N, O),
and optionally aux (N, A). Everything downstream of the seed (init, shuffle,
dropout masks) is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model, mse_loss


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    holdout_frac: float = 0.1
    divergence_loss: float = 1e6


def _as_batch(dataset, idx):
    batch = {
        "images": dataset["images"][idx],
        "targets": dataset["targets"][idx],
    }
    if dataset.get("aux") is not None:
        batch["aux"] = dataset["aux"][idx]
    return batch


def evaluate(model, dataset, batch_size=256):
    """Mean MSE over a dataset in eval mode."""
    n = len(dataset["images"])
    if n == 0:
        return float("nan")
    total = 0.0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        b = _as_batch(dataset, idx)
        pred = model.forward(b["images"], b.get("aux"), train=False)
        total += float(np.sum((pred - b["targets"]) ** 2))
    return total / (n * dataset["targets"].shape[1])


def train(model_or_spec, dataset, config=TrainConfig()):
    """Train a model; returns (model, history).

    history = {train_loss: [...], holdout_loss: [...], n_train, n_holdout}.
    The final parameters are snapped to float32 precision so that saved and
    reloaded models are bit-identical to the trained one.
    """
    if isinstance(model_or_spec, Model):
        model = model_or_spec
    else:
        model = Model(model_or_spec, seed=config.seed)
    n = len(dataset["images"])
    if n == 0:
        raise ValueError("dataset is empty")
    if config.lr <= 0:
        raise ValueError("lr must be positive")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(n)
    n_holdout = int(round(n * config.holdout_frac)) if n > 1 else 0
    holdout_idx = order[:n_holdout]
    train_idx = order[n_holdout:]
    holdout = _as_batch(dataset, holdout_idx) if n_holdout else None

    params = model.params()
    velocity = [np.zeros_like(p) for p in params]
    history = {"train_loss": [], "holdout_loss": [], "n_train": len(train_idx), "n_holdout": n_holdout}

    for epoch in range(config.epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = _as_batch(dataset, idx)
            pred = model.forward(batch["images"], batch.get("aux"), train=True, rng=rng)
            loss, dpred = mse_loss(pred, batch["targets"])
            if not np.isfinite(loss) or loss > config.divergence_loss:
                raise TrainingDiverged(f"diverged at epoch {epoch}")
            model.backward(dpred)
            grads = model.grads()
            for p, v, g in zip(params, velocity, grads):
                if config.weight_decay:
                    g = g + config.weight_decay * p
                v *= config.momentum
                v -= config.lr * g
                p += v
            epoch_loss += loss
            n_batches += 1
        history["train_loss"].append(epoch_loss / max(n_batches, 1))
        if holdout is not None:
            hold = {"images": holdout["images"], "targets": holdout["targets"], "aux": holdout.get("aux")}
            history["holdout_loss"].append(evaluate(model, hold))

    # Snap to f32 precision: the on-disk format stores f32 weights, so a
    # reloaded model is bit-identical to the trained one.
    for p in params:
        p[...] = p.astype(np.float32)
    model.metadata.update(
        {
            "epochs": config.epochs,
            "seed": config.seed,
            "final_train_loss": history["train_loss"][-1] if history["train_loss"] else None,
            "final_holdout_loss": history["holdout_loss"][-1] if history["holdout_loss"] else None,
        }
    )
    return model, history
