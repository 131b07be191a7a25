"""Softmax-head training on frozen backbone features.

The trainable head is dropout -> dense -> softmax; the objective is
L2-regularized categorical cross-entropy minimized with seeded mini-batch
SGD plus momentum and early stopping on validation loss. Head math runs in
float64 so analytic gradients check against central finite differences.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetManifest, load_standardized
from .nnrt import extract_features
from .seeding import derive_stream, make_generator

LOG_CLAMP = 1e-12
FEATURE_MAGIC = b"HFTC"


class TrainError(Exception):
    pass


class TrainingDiverged(TrainError):
    """Loss went non-finite; usually the learning rate is too high."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    l2_lambda: float = 1e-4
    dropout_p: float = 0.2
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise TrainError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainError(f"momentum must be in [0,1), got {self.momentum}")
        if self.l2_lambda < 0:
            raise TrainError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise TrainError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise TrainError("batch_size, max_epochs, and patience must all be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        cfg = cls(**{k: d[k] for k in cls().__dict__ if k in d})
        cfg.validate()
        return cfg


@dataclass
class HeadParams:
    weight: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise TrainError(f"head shapes disagree: W {self.weight.shape}, b {self.bias.shape}")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise TrainError("head parameters must be finite")

    def to_dict(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadParams":
        return cls(np.array(d["weight"]), np.array(d["bias"]))


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "val_loss": self.val_loss,
            "val_accuracy": self.val_accuracy,
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


def _softmax64(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape[1] != num_classes:
            raise TrainError(f"one-hot labels have width {labels.shape[1]}, expected {num_classes}")
        return labels.astype(np.float64)
    if labels.size and labels.max() >= num_classes:
        raise TrainError(f"label index {int(labels.max())} out of range for {num_classes} classes")
    if labels.size and labels.min() < 0:
        raise TrainError("negative label index")
    y = np.zeros((len(labels), num_classes), dtype=np.float64)
    y[np.arange(len(labels)), labels] = 1.0
    return y


def cross_entropy_loss(probs, labels, weight=None, l2_lambda: float = 0.0) -> float:
    """Mean negative log-likelihood plus l2_lambda * ||W||_F^2.

    The log is clamped at log(1e-12) so the loss stays finite for any
    probability input.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise TrainError(f"probs must be N x C, got shape {probs.shape}")
    row_sums = probs.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise TrainError("probability rows must sum to 1 within 1e-6")
    y = _one_hot(labels, probs.shape[1])
    p_true = (probs * y).sum(axis=1)
    loss = -np.log(np.maximum(p_true, LOG_CLAMP)).mean()
    if l2_lambda and weight is not None:
        loss += l2_lambda * float(np.sum(np.asarray(weight, dtype=np.float64) ** 2))
    return float(loss)


def _loss_and_grads(features, y, weight, bias, l2_lambda):
    """Exact analytic gradient of the regularized cross-entropy.

    dZ = (P - Y)/N, dW = dZ^T F + 2*lambda*W, db = column sums of dZ.
    """
    n = features.shape[0]
    with np.errstate(over="ignore", invalid="ignore"):  # inf/nan is how divergence is detected
        probs = _softmax64(features @ weight.T + bias)
        p_true = np.maximum((probs * y).sum(axis=1), LOG_CLAMP)
        loss = -np.log(p_true).mean() + l2_lambda * np.sum(weight**2)
        dz = (probs - y) / n
        dw = dz.T @ features + 2.0 * l2_lambda * weight
        db = dz.sum(axis=0)
    return loss, dw, db


def apply_dropout(features, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout: kept activations scale by 1/(1-p)."""
    if p <= 0.0:
        return features
    mask = (rng.random(features.shape) >= p).astype(np.float64)
    return features * mask / (1.0 - p)


def head_gradients(features, labels, params: HeadParams, config: TrainConfig,
                   mode: str = "infer", rng: np.random.Generator | None = None):
    """Loss and exact gradients for one batch; train mode applies dropout
    to the features first (and the gradient flows through the same mask)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.weight.shape[1]:
        raise TrainError(f"features {features.shape} do not match head {params.weight.shape}")
    y = _one_hot(labels, params.weight.shape[0])
    if mode == "train" and config.dropout_p > 0.0:
        if rng is None:
            raise TrainError("train-mode gradients with dropout need an rng")
        features = apply_dropout(features, config.dropout_p, rng)
    elif mode not in ("train", "infer"):
        raise TrainError(f"unknown mode {mode!r}")
    loss, dw, db = _loss_and_grads(features, y, params.weight, params.bias, config.l2_lambda)
    return dw, db, float(loss)


def _split_metrics(features, y, weight, bias):
    probs = _softmax64(features @ weight.T + bias)
    p_true = np.maximum((probs * y).sum(axis=1), LOG_CLAMP)
    loss = float(-np.log(p_true).mean())
    acc = float((probs.argmax(axis=1) == y.argmax(axis=1)).mean())
    return loss, acc


def train_head(features_train, labels_train, features_val, labels_val,
               config: TrainConfig) -> tuple[HeadParams, TrainReport]:
    """Seeded SGD with momentum over shuffled mini-batches, early stopping
    on validation loss; returns the parameters from the best epoch."""
    config.validate()
    f_tr = np.asarray(features_train, dtype=np.float64)
    f_va = np.asarray(features_val, dtype=np.float64)
    if f_tr.ndim != 2 or f_va.ndim != 2 or f_tr.shape[1] != f_va.shape[1]:
        raise TrainError(f"feature widths disagree: train {f_tr.shape}, val {f_va.shape}")
    if len(f_tr) == 0 or len(f_va) == 0:
        raise TrainError("both splits need at least one sample")
    num_classes = int(max(np.max(labels_train), np.max(labels_val))) + 1
    y_tr = _one_hot(labels_train, num_classes)
    y_va = _one_hot(labels_val, num_classes)

    d = f_tr.shape[1]
    weight = np.zeros((num_classes, d))
    bias = np.zeros(num_classes)
    v_w = np.zeros_like(weight)
    v_b = np.zeros_like(bias)

    report = TrainReport()
    best_val = float("inf")
    best = (weight.copy(), bias.copy())
    since_best = 0

    for epoch in range(config.max_epochs):
        # batch composition and dropout masks are pure functions of (seed, epoch)
        order = make_generator(config.seed, derive_stream("shuffle", epoch)).permutation(len(f_tr))
        drop_rng = make_generator(config.seed, derive_stream("dropout", epoch))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            fb = apply_dropout(f_tr[idx], config.dropout_p, drop_rng)
            loss, dw, db = _loss_and_grads(fb, y_tr[idx], weight, bias, config.l2_lambda)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; try a smaller learning rate "
                    f"(current {config.learning_rate})"
                )
            v_w = config.momentum * v_w - config.learning_rate * dw
            v_b = config.momentum * v_b - config.learning_rate * db
            weight = weight + v_w
            bias = bias + v_b

        tr_loss, tr_acc = _split_metrics(f_tr, y_tr, weight, bias)
        va_loss, va_acc = _split_metrics(f_va, y_va, weight, bias)
        report.train_loss.append(tr_loss)
        report.train_accuracy.append(tr_acc)
        report.val_loss.append(va_loss)
        report.val_accuracy.append(va_acc)

        if va_loss < best_val:
            best_val = va_loss
            best = (weight.copy(), bias.copy())
            report.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopped_early = True
                break

    return HeadParams(best[0], best[1]), report


def head_probs(features, head: HeadParams) -> np.ndarray:
    return _softmax64(np.asarray(features, dtype=np.float64) @ head.weight.T + head.bias)


def evaluate_on_split(graph, weights, head: HeadParams, manifest: DatasetManifest,
                      split: str, batch_size: int = 8):
    """Infer-mode (loss, accuracy) over one manifest split; no dropout, no
    augmentation. Loss is plain cross-entropy."""
    records = manifest.records_for_split(split)
    if not records:
        raise TrainError(f"split {split!r} is empty")
    class_index = {c: i for i, c in enumerate(manifest.classes)}
    labels = np.array([class_index[r.class_label] for r in records])
    probs = predict_split_probs(graph, weights, head, records, batch_size)
    loss = cross_entropy_loss(probs, labels)
    acc = float((probs.argmax(axis=1) == labels).mean())
    return loss, acc


def predict_split_probs(graph, weights, head: HeadParams, records, batch_size: int = 8):
    outs = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        x = np.stack([load_standardized(r.source_path) for r in chunk])
        feats = extract_features(graph, weights, x)
        outs.append(head_probs(feats, head))
    return np.concatenate(outs, axis=0)


def extract_split_features(graph, weights, manifest: DatasetManifest, split: str,
                           batch_size: int = 8):
    """Frozen-backbone features, ids, and integer labels for one split."""
    records = manifest.records_for_split(split)
    if not records:
        raise TrainError(f"split {split!r} is empty")
    class_index = {c: i for i, c in enumerate(manifest.classes)}
    feats = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        x = np.stack([load_standardized(r.source_path) for r in chunk])
        feats.append(extract_features(graph, weights, x))
    features = np.concatenate(feats, axis=0).astype(np.float32)
    ids = [r.id for r in records]
    labels = [class_index[r.class_label] for r in records]
    return features, ids, labels


def save_features(path, features, ids, labels, classes) -> None:
    """Flat binary feature cache: magic 'HFTC', u32 version, then N x D
    little-endian float32; ids/labels live in a JSON sidecar."""
    features = np.ascontiguousarray(features, dtype=np.float32)
    if features.ndim != 2 or len(ids) != len(features) or len(labels) != len(features):
        raise TrainError(f"feature cache shape mismatch: {features.shape}, {len(ids)} ids, {len(labels)} labels")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", 1))
        if features.dtype.byteorder == ">":
            features = features.astype("<f4")
        f.write(features.tobytes())
    sidecar = {
        "version": 1,
        "count": int(features.shape[0]),
        "feature_dim": int(features.shape[1]),
        "ids": list(ids),
        "labels": [int(l) for l in labels],
        "classes": list(classes),
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f)


def load_features(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != FEATURE_MAGIC:
            raise TrainError(f"{path} is not a feature cache (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise TrainError(f"unsupported feature cache version {version}")
        payload = f.read()
    sidecar_path = str(path) + ".json"
    if not os.path.exists(sidecar_path):
        raise TrainError(f"missing sidecar {sidecar_path}")
    with open(sidecar_path, encoding="utf-8") as f:
        meta = json.load(f)
    n, d = meta["count"], meta["feature_dim"]
    if len(payload) != n * d * 4:
        raise TrainError(f"feature payload is {len(payload)} bytes, expected {n * d * 4}")
    features = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    return features, meta["ids"], meta["labels"], meta["classes"]
