"""Layer definitions and the forward/backward passes.

Tensors are NHWC float64. Each layer caches what its backward pass needs;
a Model owns the parameter arrays and exposes flat parameter/gradient lists
in a fixed order so training and serialization stay deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    activation: str = "relu"
    stride: int = 2  # fixed-stride, no-padding convolutions keep the net tiny


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class ConcatAux:
    pass


@dataclass(frozen=True)
class Dense:
    width: int
    activation: str = "linear"


LAYER_KINDS = {"conv": Conv, "dropout": Dropout, "flatten": Flatten, "concat_aux": ConcatAux, "dense": Dense}


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, int, int]  # (H, W, C)
    layers: tuple
    aux_dim: int = 0

    def to_dict(self):
        out = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                out.append({"kind": "conv", "filters": layer.filters, "kernel": layer.kernel,
                            "activation": layer.activation, "stride": layer.stride})
            elif isinstance(layer, Dropout):
                out.append({"kind": "dropout", "rate": layer.rate})
            elif isinstance(layer, Flatten):
                out.append({"kind": "flatten"})
            elif isinstance(layer, ConcatAux):
                out.append({"kind": "concat_aux"})
            elif isinstance(layer, Dense):
                out.append({"kind": "dense", "width": layer.width, "activation": layer.activation})
            else:
                raise TypeError(f"unknown layer {layer!r}")
        return {"input_shape": list(self.input_shape), "aux_dim": self.aux_dim, "layers": out}

    @classmethod
    def from_dict(cls, data):
        layers = []
        for d in data["layers"]:
            kind = d["kind"]
            if kind == "conv":
                layers.append(Conv(d["filters"], d["kernel"], d["activation"], d["stride"]))
            elif kind == "dropout":
                layers.append(Dropout(d["rate"]))
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "concat_aux":
                layers.append(ConcatAux())
            elif kind == "dense":
                layers.append(Dense(d["width"], d["activation"]))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cls(tuple(data["input_shape"]), tuple(layers), data.get("aux_dim", 0))


def _activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "linear":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def _activation_grad(z, activation):
    if activation == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


class _ConvOp:
    def __init__(self, spec, in_shape, rng, index, dtype):
        h, w, c = in_shape
        k, s = spec.kernel, spec.stride
        if k > h or k > w:
            raise ShapeError(f"layer {index} (conv): kernel {k} exceeds input {in_shape}")
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = ((h - k) // s + 1, (w - k) // s + 1, spec.filters)
        fan_in = k * k * c
        scale = np.sqrt(2.0 / fan_in) if spec.activation == "relu" else np.sqrt(1.0 / fan_in)
        self.w = rng.normal(0.0, scale, size=(fan_in, spec.filters)).astype(dtype)
        self.b = np.zeros(spec.filters, dtype=dtype)
        self.index = index

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train, rng):
        k, s = self.spec.kernel, self.spec.stride
        b_, (oh, ow, f) = x.shape[0], self.out_shape
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        # (B, OH, OW, C, k, k) -> (B, OH*OW, C*k*k)
        cols = win.reshape(b_, oh * ow, -1)
        z = cols @ self.w + self.b
        self._cols = cols
        self._z = z
        return _activate(z, self.spec.activation).reshape(b_, oh, ow, f)

    def backward(self, dy, need_input_grad=True):
        k, s = self.spec.kernel, self.spec.stride
        b_ = dy.shape[0]
        oh, ow, f = self.out_shape
        dz = dy.reshape(b_, oh * ow, f) * _activation_grad(self._z, self.spec.activation)
        j = self._cols.shape[2]
        self.dw = self._cols.reshape(-1, j).T @ dz.reshape(-1, f)
        self.db = dz.sum(axis=(0, 1))
        if not need_input_grad:
            return None
        dcols = (dz @ self.w.T).reshape(b_, oh, ow, self.in_shape[2], k, k)
        dx = np.zeros((b_,) + self.in_shape, dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dx[:, ki : ki + s * oh : s, kj : kj + s * ow : s, :] += dcols[:, :, :, :, ki, kj]
        return dx

    def grads(self):
        return [self.dw, self.db]


class _DenseOp:
    def __init__(self, spec, in_dim, rng, index, dtype):
        self.spec = spec
        scale = np.sqrt(2.0 / in_dim) if spec.activation == "relu" else np.sqrt(1.0 / in_dim)
        self.w = rng.normal(0.0, scale, size=(in_dim, spec.width)).astype(dtype)
        self.b = np.zeros(spec.width, dtype=dtype)
        self.index = index

    def params(self):
        return [self.w, self.b]

    def forward(self, x, train, rng):
        z = x @ self.w + self.b
        self._x = x
        self._z = z
        return _activate(z, self.spec.activation)

    def backward(self, dy):
        dz = dy * _activation_grad(self._z, self.spec.activation)
        self.dw = self._x.T @ dz
        self.db = dz.sum(axis=0)
        return dz @ self.w.T

    def grads(self):
        return [self.dw, self.db]


class _DropoutOp:
    def __init__(self, spec, index):
        self.spec = spec
        self.index = index

    def params(self):
        return []

    def forward(self, x, train, rng):
        if not train or self.spec.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode forward through dropout requires an rng")
        keep = 1.0 - self.spec.rate
        self._mask = ((rng.random(x.shape) < keep) / keep).astype(x.dtype)
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask

    def grads(self):
        return []


class _FlattenOp:
    def __init__(self, in_shape, index):
        self.in_shape = in_shape
        self.index = index

    def params(self):
        return []

    def forward(self, x, train, rng):
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape((dy.shape[0],) + self.in_shape)

    def grads(self):
        return []


class _ConcatAuxOp:
    def __init__(self, aux_dim, index):
        self.aux_dim = aux_dim
        self.index = index

    def params(self):
        return []

    def forward(self, x, train, rng, aux=None):
        if aux is None:
            raise ShapeError(f"layer {self.index} (concat_aux): model requires an aux input")
        if aux.shape != (x.shape[0], self.aux_dim):
            raise ShapeError(
                f"layer {self.index} (concat_aux): aux shape {aux.shape} != "
                f"({x.shape[0]}, {self.aux_dim})"
            )
        self._split = x.shape[1]
        return np.concatenate([x, aux], axis=1)

    def backward(self, dy):
        return dy[:, : self._split]

    def grads(self):
        return []


class Model:
    """A network built from a ModelSpec with seed-deterministic initialization.

    dtype float32 is the training default (the file format stores f32);
    float64 exists for finite-difference verification.
    """

    def __init__(self, spec, seed=0, dtype=np.float32):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.ops = []
        shape = tuple(spec.input_shape)
        flat = None  # feature width once flattened
        for i, layer in enumerate(spec.layers):
            if isinstance(layer, Conv):
                if flat is not None:
                    raise ShapeError(f"layer {i} (conv): input already flattened")
                op = _ConvOp(layer, shape, rng, i, self.dtype)
                shape = op.out_shape
            elif isinstance(layer, Dropout):
                op = _DropoutOp(layer, i)
            elif isinstance(layer, Flatten):
                if flat is not None:
                    raise ShapeError(f"layer {i} (flatten): input already flat")
                op = _FlattenOp(shape, i)
                flat = int(np.prod(shape))
            elif isinstance(layer, ConcatAux):
                if flat is None:
                    raise ShapeError(f"layer {i} (concat_aux): requires flattened input")
                if spec.aux_dim <= 0:
                    raise ShapeError(f"layer {i} (concat_aux): spec.aux_dim must be positive")
                op = _ConcatAuxOp(spec.aux_dim, i)
                flat = flat + spec.aux_dim
            elif isinstance(layer, Dense):
                if flat is None:
                    raise ShapeError(f"layer {i} (dense): requires flattened input")
                op = _DenseOp(layer, flat, rng, i, self.dtype)
                flat = layer.width
            else:
                raise TypeError(f"layer {i}: unknown layer {layer!r}")
            self.ops.append(op)
        self.output_dim = flat if flat is not None else shape
        self.metadata = {"seed": seed}

    def params(self):
        out = []
        for op in self.ops:
            out.extend(op.params())
        return out

    def grads(self):
        out = []
        for op in self.ops:
            out.extend(op.grads())
        return out

    def set_params(self, arrays):
        mine = self.params()
        if len(arrays) != len(mine):
            raise ShapeError(f"expected {len(mine)} parameter arrays, got {len(arrays)}")
        i = 0
        for op in self.ops:
            own = op.params()
            for j in range(len(own)):
                if arrays[i].shape != own[j].shape:
                    raise ShapeError(
                        f"layer {op.index}: parameter shape {arrays[i].shape} != {own[j].shape}"
                    )
                own[j][...] = arrays[i]
                i += 1

    def forward(self, image, aux=None, train=False, rng=None):
        x = np.asarray(image, dtype=self.dtype)
        squeeze = False
        if x.ndim == len(self.spec.input_shape):
            x = x[None]
            squeeze = True
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise ShapeError(
                f"input shape {x.shape[1:]} does not match spec {self.spec.input_shape}"
            )
        if aux is not None:
            aux = np.asarray(aux, dtype=self.dtype)
            if aux.ndim == 1:
                aux = aux[None]
        for op in self.ops:
            if isinstance(op, _ConcatAuxOp):
                x = op.forward(x, train, rng, aux=aux)
            else:
                x = op.forward(x, train, rng)
        return x[0] if squeeze else x

    def backward(self, d_out, need_input_grad=False):
        """Backpropagate an output gradient; returns the input gradient only
        when requested (saliency needs it, training does not)."""
        g = np.asarray(d_out, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None]
        for pos in range(len(self.ops) - 1, -1, -1):
            op = self.ops[pos]
            if pos == 0 and isinstance(op, _ConvOp):
                g = op.backward(g, need_input_grad=need_input_grad)
            else:
                g = op.backward(g)
        return g

    def relu_signs(self):
        """Sign pattern of every relu pre-activation from the last forward pass
        (used to detect kink crossings in finite-difference checks)."""
        signs = []
        for op in self.ops:
            if isinstance(op, (_ConvOp, _DenseOp)) and op.spec.activation == "relu":
                signs.append(np.sign(op._z))
        return signs


def forward(spec, params, image_input, aux_input=None, train_mode=False, seed=0):
    """Functional forward pass: builds a model from spec, loads params, runs it."""
    model = Model(spec, seed=seed)
    model.set_params(params)
    rng = np.random.default_rng(seed) if train_mode else None
    return model.forward(image_input, aux_input, train=train_mode, rng=rng)


def mse_loss(pred, target):
    """Mean over batch and output dims of squared error, plus its gradient."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    err = pred - target
    loss = float(np.mean(err.astype(np.float64) ** 2))
    grad = 2.0 * err / err.size
    return loss, grad


def backward(spec, params, batch, seed=0):
    """Gradients of the MSE loss over a batch dict {images, aux, targets}."""
    model = Model(spec, seed=seed)
    model.set_params(params)
    pred = model.forward(batch["images"], batch.get("aux"), train=False)
    loss, dpred = mse_loss(pred, batch["targets"])
    if not np.isfinite(loss):
        per = np.mean((pred - np.asarray(batch["targets"])) ** 2, axis=tuple(range(1, pred.ndim)))
        bad = int(np.flatnonzero(~np.isfinite(per))[0])
        raise FloatingPointError(f"non-finite loss at batch index {bad}")
    model.backward(dpred)
    return model.grads()
