"""Self-describing binary model files.

Layout (all little-endian): magic "LFDM", u16 format version, u32 JSON header
length, JSON header {spec, metadata, shapes}, then the parameter arrays as
raw f32 in header order. See docs/model_format.md.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import Model, ModelSpec

MODEL_MAGIC = b"LFDM"
MODEL_FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def save_model(model, path, metadata=None):
    meta = dict(model.metadata)
    if metadata:
        meta.update(metadata)
    params = model.params()
    header = {
        "spec": model.spec.to_dict(),
        "metadata": meta,
        "shapes": [list(p.shape) for p in params],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HI", MODEL_FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise ModelFileError(f"{path}: not a model file (bad magic {magic!r})")
        version, hlen = struct.unpack("<HI", fh.read(6))
        if version != MODEL_FORMAT_VERSION:
            raise ModelFileError(f"{path}: unsupported model format version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        model = Model(spec, seed=header["metadata"].get("seed", 0))
        arrays = []
        for shape in header["shapes"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ModelFileError(f"{path}: truncated parameter data")
            arrays.append(np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float64))
    model.set_params(arrays)
    model.metadata = header["metadata"]
    return model
