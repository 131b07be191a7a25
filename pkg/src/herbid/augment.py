"""Seeded training-time image augmentation.

Every operator is a pure function of (image, parameters, rng state): the
pipeline sampler resolves all randomness up front into a ConcreteAugmentation
that replays byte-identically. Operators preserve the standard image
contract (3xHxW float32, values in [0,1]).

Sampling order inside sample_pipeline is fixed: flip_v, flip_h, rotate,
noise, multiply, crop, elastic, then the two replay seeds (noise field,
elastic field). Inclusion is Bernoulli for the flips; the remaining
operators are always included and collapse to no-ops at their identity
parameters (angle 0, std 0, factor 1, fractions 0, alpha 0).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .kernels import resize_bilinear, warp_bilinear
from .seeding import make_generator


class AugmentError(Exception):
    pass


@dataclass
class AugmentSpec:
    flip_vertical_p: float = 0.5
    flip_horizontal_p: float = 0.5
    rotate_range_deg: tuple[float, float] = (-45.0, 45.0)
    noise_std_range: tuple[float, float] = (0.0, 0.1)
    multiply_range: tuple[float, float] = (0.8, 1.2)
    crop_fraction_range: tuple[float, float] = (0.0, 0.1)
    elastic_alpha_range: tuple[float, float] = (0.5, 3.5)
    elastic_sigma: float = 0.25

    def validate(self) -> None:
        for name in ("flip_vertical_p", "flip_horizontal_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentError(f"{name} must be in [0,1], got {p}")
        for name in ("rotate_range_deg", "noise_std_range", "multiply_range",
                     "crop_fraction_range", "elastic_alpha_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise AugmentError(f"{name} must be ordered low <= high, got ({lo}, {hi})")
        if self.elastic_sigma <= 0:
            raise AugmentError(f"elastic_sigma must be positive, got {self.elastic_sigma}")

    def to_dict(self) -> dict:
        return {
            "flip_vertical_p": self.flip_vertical_p,
            "flip_horizontal_p": self.flip_horizontal_p,
            "rotate_range_deg": list(self.rotate_range_deg),
            "noise_std_range": list(self.noise_std_range),
            "multiply_range": list(self.multiply_range),
            "crop_fraction_range": list(self.crop_fraction_range),
            "elastic_alpha_range": list(self.elastic_alpha_range),
            "elastic_sigma": self.elastic_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        spec = cls(
            flip_vertical_p=d.get("flip_vertical_p", 0.5),
            flip_horizontal_p=d.get("flip_horizontal_p", 0.5),
            rotate_range_deg=tuple(d.get("rotate_range_deg", (-45.0, 45.0))),
            noise_std_range=tuple(d.get("noise_std_range", (0.0, 0.1))),
            multiply_range=tuple(d.get("multiply_range", (0.8, 1.2))),
            crop_fraction_range=tuple(d.get("crop_fraction_range", (0.0, 0.1))),
            elastic_alpha_range=tuple(d.get("elastic_alpha_range", (0.5, 3.5))),
            elastic_sigma=d.get("elastic_sigma", 0.25),
        )
        spec.validate()
        return spec


def load_augment_spec(path: str | os.PathLike) -> AugmentSpec:
    with open(path, encoding="utf-8") as f:
        return AugmentSpec.from_dict(json.load(f))


@dataclass
class RngState:
    """A (seed, stream) pair naming one PCG64 draw sequence."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return make_generator(self.seed, self.stream)


def _require_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise AugmentError(f"expected a 3xHxW image, got shape {img.shape}")
    if img.dtype != np.float32:
        raise AugmentError(f"expected float32 pixels, got {img.dtype}")
    return img


def flip(img: np.ndarray, axis: str) -> np.ndarray:
    img = _require_image(img)
    if axis == "vertical":
        return np.ascontiguousarray(img[:, ::-1, :])
    if axis == "horizontal":
        return np.ascontiguousarray(img[:, :, ::-1])
    raise AugmentError(f"unknown flip axis {axis!r}")


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image center, bilinear, out-of-frame filled with 0."""
    img = _require_image(img)
    if not -45.0 <= angle_deg <= 45.0:
        raise AugmentError(f"rotation angle {angle_deg} outside [-45, 45]")
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ys = np.arange(h, dtype=np.float64) - cy
    xs = np.arange(w, dtype=np.float64) - cx
    dy, dx = np.meshgrid(ys, xs, indexing="ij")
    src_y = cy + cos_t * dy - sin_t * dx
    src_x = cx + sin_t * dy + cos_t * dx
    return warp_bilinear(img, src_y, src_x, fill=0.0)


def add_gaussian_noise(img: np.ndarray, std: float, rng: RngState) -> np.ndarray:
    img = _require_image(img)
    if not 0.0 <= std <= 0.1:
        raise AugmentError(f"noise std {std} outside [0, 0.1]")
    noise = rng.generator().normal(0.0, std, size=img.shape).astype(np.float32)
    return np.clip(img + noise, 0.0, 1.0)


def multiply(img: np.ndarray, factor: float) -> np.ndarray:
    img = _require_image(img)
    if not 0.8 <= factor <= 1.2:
        raise AugmentError(f"multiply factor {factor} outside [0.8, 1.2]")
    return np.clip(img * np.float32(factor), 0.0, 1.0)


def crop_resize(img: np.ndarray, fractions: tuple[float, float, float, float]) -> np.ndarray:
    """Crop (top, bottom, left, right) side fractions, resize back to HxW."""
    img = _require_image(img)
    if len(fractions) != 4 or any(not 0.0 <= f <= 0.1 for f in fractions):
        raise AugmentError(f"crop fractions {fractions} outside [0, 0.1]")
    _, h, w = img.shape
    top, bottom, left, right = (int(f * d) for f, d in zip(fractions, (h, h, w, w)))
    if h - top - bottom < 1 or w - left - right < 1:
        raise AugmentError(f"crop window degenerate for fractions {fractions} on {h}x{w}")
    window = np.ascontiguousarray(img[:, top : h - bottom, left : w - right])
    return resize_bilinear(window, h, w)


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def _gaussian_blur(field: np.ndarray, sigma: float) -> np.ndarray:
    """Separable zero-padded Gaussian blur of a 2-D float64 field."""
    k = _gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    padded = np.pad(field, ((r, r), (0, 0)))
    rows = sum(k[i] * padded[i : i + field.shape[0], :] for i in range(len(k)))
    padded = np.pad(rows, ((0, 0), (r, r)))
    return sum(k[i] * padded[:, i : i + field.shape[1]] for i in range(len(k)))


def elastic_displacement(
    shape: tuple[int, int], alpha: float, sigma: float, rng: RngState
) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed random displacement fields (dy, dx), each bounded by alpha."""
    gen = rng.generator()
    raw = gen.uniform(-1.0, 1.0, size=(2,) + shape)
    dy = alpha * _gaussian_blur(raw[0], sigma)
    dx = alpha * _gaussian_blur(raw[1], sigma)
    return dy, dx


def elastic(img: np.ndarray, alpha: float, sigma: float, rng: RngState) -> np.ndarray:
    """Warp by smoothed random displacements; borders replicate."""
    img = _require_image(img)
    if alpha < 0.0:
        raise AugmentError(f"elastic alpha {alpha} must be non-negative")
    _, h, w = img.shape
    dy, dx = elastic_displacement((h, w), alpha, sigma, rng)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return warp_bilinear(img, gy + dy, gx + dx, fill=None)


@dataclass
class ConcreteAugmentation:
    """A fully resolved augmentation: replaying it is byte-deterministic."""

    ops: list[tuple[str, dict]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps([[name, params] for name, params in self.ops])

    @classmethod
    def from_json(cls, text: str) -> "ConcreteAugmentation":
        return cls(ops=[(name, params) for name, params in json.loads(text)])


def sample_pipeline(spec: AugmentSpec, rng: RngState) -> ConcreteAugmentation:
    """Resolve inclusion and parameters for one training sample."""
    spec.validate()
    gen = rng.generator()
    include_v = gen.random() < spec.flip_vertical_p
    include_h = gen.random() < spec.flip_horizontal_p
    angle = float(gen.uniform(*spec.rotate_range_deg))
    std = float(gen.uniform(*spec.noise_std_range))
    factor = float(gen.uniform(*spec.multiply_range))
    fractions = [float(v) for v in gen.uniform(*spec.crop_fraction_range, size=4)]
    alpha = float(gen.uniform(*spec.elastic_alpha_range))
    noise_seed = int(gen.integers(0, 2**63))
    elastic_seed = int(gen.integers(0, 2**63))

    ops: list[tuple[str, dict]] = []
    if include_v:
        ops.append(("flip", {"axis": "vertical"}))
    if include_h:
        ops.append(("flip", {"axis": "horizontal"}))
    ops.append(("rotate", {"angle_deg": angle}))
    ops.append(("noise", {"std": std, "seed": noise_seed}))
    ops.append(("multiply", {"factor": factor}))
    ops.append(("crop", {"fractions": fractions}))
    ops.append(("elastic", {"alpha": alpha, "sigma": spec.elastic_sigma, "seed": elastic_seed}))
    return ConcreteAugmentation(ops)


def apply(aug: ConcreteAugmentation, img: np.ndarray) -> np.ndarray:
    img = _require_image(img)
    out = img
    for name, params in aug.ops:
        if name == "flip":
            out = flip(out, params["axis"])
        elif name == "rotate":
            out = rotate(out, params["angle_deg"])
        elif name == "noise":
            out = add_gaussian_noise(out, params["std"], RngState(params["seed"]))
        elif name == "multiply":
            out = multiply(out, params["factor"])
        elif name == "crop":
            out = crop_resize(out, tuple(params["fractions"]))
        elif name == "elastic":
            out = elastic(out, params["alpha"], params["sigma"], RngState(params["seed"]))
        else:
            raise AugmentError(f"unknown op {name!r} in augmentation")
    return out
