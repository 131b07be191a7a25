"""Shared prediction path: one code path serves both the CLI and HTTP API."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .dataset import HerbInfoStore, decode_image_bytes, standardize
from .modelpack import ModelPackage, deserialize
from .nnrt import forward


class PredictError(Exception):
    """Bad prediction input (undecodable image, k out of range)."""


@dataclass
class LoadedModel:
    package: ModelPackage
    checksum: str
    source_path: str = ""

    @property
    def num_classes(self) -> int:
        return len(self.package.class_labels)


def load_model(path) -> LoadedModel:
    with open(path, "rb") as f:
        data = f.read()
    package = deserialize(data)
    return LoadedModel(
        package=package,
        checksum=hashlib.sha256(data).hexdigest(),
        source_path=str(path),
    )


def predict_topk(model: LoadedModel, image_bytes: bytes, k: int,
                 herbs: HerbInfoStore | None = None) -> dict:
    """Decode, standardize, run the packaged model, and join herb info.

    Confidences are the softmax distribution; the top-k entries are its
    non-increasing prefix. Absent herb info is non-fatal (the field is
    simply omitted).
    """
    start = time.perf_counter()
    c = model.num_classes
    if not isinstance(k, int) or not 1 <= k <= c:
        raise PredictError(f"k must be an integer in [1, {c}], got {k!r}")
    try:
        rgb = decode_image_bytes(image_bytes)
    except Exception as exc:
        raise PredictError(f"could not decode image: {exc}") from exc
    x = standardize(rgb)
    probs = forward(model.package.graph, model.package.weights, x[None])[0]
    order = np.argsort(-probs, kind="stable")[:k]
    topk = []
    for idx in order:
        name = model.package.class_labels[int(idx)]
        entry = {
            "class_index": int(idx),
            "scientific_name": name,
            "confidence": float(probs[idx]),
        }
        if herbs is not None:
            info = herbs.lookup(name)
            if info is not None:
                entry["info"] = info.to_dict()
        topk.append(entry)
    return {
        "topk": topk,
        "model_name": model.package.graph.name,
        "latency_ms": (time.perf_counter() - start) * 1000.0,
    }
