"""CNN inference runtime: a layer DAG over float32 NCHW tensors.

Supports the layer kinds needed for densely connected backbones (conv,
batchnorm in inference mode, relu, max/avg pooling, channel concat, global
average pooling, dense, dropout, softmax), frozen-backbone feature
extraction at a declared head boundary, and per-layer activation dumps.

Convolution is cross-correlation (no kernel flip), kernels are OIHW,
activations NCHW. Graphs are immutable after construction and forward
passes in infer mode are pure functions of (graph, weights, input).
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import kernels
from .seeding import make_generator

LAYER_KINDS = {
    "conv2d",
    "batchnorm",
    "relu",
    "maxpool",
    "avgpool",
    "concat",
    "global_avg_pool",
    "dense",
    "dropout",
    "softmax",
}

DEFAULT_BATCHNORM_EPS = 1e-5

GRAPH_INPUT = "input"


class GraphError(Exception):
    pass


@dataclass
class LayerSpec:
    kind: str
    name: str
    inputs: list[str]
    params: dict = field(default_factory=dict)
    trainable: bool = False

    def validate(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"layer {self.name!r} has unknown kind {self.kind!r}")
        if self.kind == "conv2d":
            if self.params.get("filters", 0) < 1:
                raise GraphError(f"conv layer {self.name!r} needs filters >= 1")
            sh, sw = self.params.get("stride", (1, 1))
            if sh < 1 or sw < 1:
                raise GraphError(f"conv layer {self.name!r} needs stride >= 1")
            if self.params.get("padding", "valid") not in ("valid", "same"):
                raise GraphError(f"conv layer {self.name!r} padding must be 'valid' or 'same'")
        if self.kind == "dense" and self.params.get("units", 0) < 1:
            raise GraphError(f"dense layer {self.name!r} needs units >= 1")
        if self.kind == "dropout":
            p = self.params.get("p", 0.0)
            if not 0.0 <= p < 1.0:
                raise GraphError(f"dropout layer {self.name!r} needs p in [0,1), got {p}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": self.name, "inputs": list(self.inputs)}
        params = {
            k: v
            for k, v in self.params.items()
            if not (self.kind == "conv2d" and k == "stride" and tuple(v) == (1, 1))
        }
        if params:
            d["params"] = params
        if self.trainable:
            d["trainable"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            name=d["name"],
            inputs=list(d["inputs"]),
            params=dict(d.get("params", {})),
            trainable=bool(d.get("trainable", False)),
        )


@dataclass
class ModelGraph:
    name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    head_boundary: str
    batchnorm_eps: float = DEFAULT_BATCHNORM_EPS

    def validate(self) -> None:
        seen = {GRAPH_INPUT}
        softmax_layers = []
        for layer in self.layers:
            layer.validate()
            if layer.name in seen:
                raise GraphError(f"layer name {layer.name!r} defined twice")
            for inp in layer.inputs:
                if inp not in seen:
                    raise GraphError(f"layer {layer.name!r} consumes undefined tensor {inp!r}")
            seen.add(layer.name)
            if layer.kind == "softmax":
                softmax_layers.append(layer.name)
        if not self.layers:
            raise GraphError("graph has no layers")
        if len(softmax_layers) != 1 or self.layers[-1].kind != "softmax":
            raise GraphError(f"graph must end in exactly one softmax, found {softmax_layers}")
        if self.head_boundary not in seen - {GRAPH_INPUT}:
            raise GraphError(f"head boundary {self.head_boundary!r} is not a layer output")

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise GraphError(f"no layer named {name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "head_boundary": self.head_boundary,
            "batchnorm_eps": self.batchnorm_eps,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        graph = cls(
            name=d["name"],
            input_shape=tuple(d["input_shape"]),
            layers=[LayerSpec.from_dict(l) for l in d["layers"]],
            head_boundary=d["head_boundary"],
            batchnorm_eps=float(d.get("batchnorm_eps", DEFAULT_BATCHNORM_EPS)),
        )
        graph.validate()
        return graph


# WeightStore: layer name -> parameter name -> float32 array.
WeightStore = dict


def conv2d_forward(x, kernel, bias=None, stride=(1, 1), padding="valid"):
    """Cross-correlate NCHW x with OIHW kernel ('valid' or 'same' padding)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise GraphError(f"conv2d needs rank-4 input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise GraphError(
            f"conv2d channel mismatch: input shape {tuple(x.shape)} vs kernel shape {tuple(kernel.shape)}"
        )
    sh, sw = stride
    kh, kw = kernel.shape[2], kernel.shape[3]
    if padding == "same":
        oh = math.ceil(x.shape[2] / sh)
        ow = math.ceil(x.shape[3] / sw)
        pad_h = max((oh - 1) * sh + kh - x.shape[2], 0)
        pad_w = max((ow - 1) * sw + kw - x.shape[3], 0)
        pads = (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)
    elif padding == "valid":
        pads = (0, 0, 0, 0)
    else:
        raise GraphError(f"unknown padding {padding!r}")
    return kernels.conv2d(x, kernel, bias, (sh, sw), pads)


def batchnorm_forward(x, gamma, beta, mean, var, eps=DEFAULT_BATCHNORM_EPS):
    """Inference-mode batchnorm with stored running statistics."""
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if p.shape != (c,):
            raise GraphError(f"batchnorm {name} shape {p.shape} does not match {c} channels")
    if np.any(var < 0):
        raise GraphError("batchnorm variance must be non-negative")
    shape = (1, c, 1, 1) if x.ndim == 4 else (1, c)
    scale = (gamma / np.sqrt(var + np.float32(eps))).reshape(shape)
    shift = beta.reshape(shape) - mean.reshape(shape) * scale
    return x * scale + shift


def pool_forward(x, kind, window, stride):
    if kind == "max":
        return kernels.maxpool2d(x, window, stride)
    if kind == "avg":
        return kernels.avgpool2d(x, window, stride)
    raise GraphError(f"unknown pooling kind {kind!r}")


def concat_channels(xs):
    if not xs:
        raise GraphError("concat of zero tensors")
    base = xs[0]
    for t in xs[1:]:
        if t.shape[0] != base.shape[0] or t.shape[2:] != base.shape[2:]:
            raise GraphError(f"concat spatial mismatch: {base.shape} vs {t.shape}")
    if len(xs) == 1:
        return xs[0]
    return np.concatenate(xs, axis=1)


def global_avg_pool(x):
    if x.ndim != 4:
        raise GraphError(f"global_avg_pool needs a rank-4 input, got shape {x.shape}")
    return x.mean(axis=(2, 3), dtype=np.float64).astype(np.float32)


def dense_forward(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise GraphError(f"dense shape mismatch: input {x.shape} vs weight {weight.shape}")
    return (x @ weight.T + bias).astype(np.float32)


def softmax(z):
    """Row-wise stabilized softmax (float64 internally, float32 out)."""
    z64 = np.asarray(z, dtype=np.float64)
    z64 = z64 - z64.max(axis=-1, keepdims=True)
    e = np.exp(z64)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def _layer_weights(weights, name, *params):
    entry = weights.get(name)
    if entry is None:
        raise GraphError(f"missing weights for layer {name!r}")
    out = []
    for p in params:
        if p not in entry:
            raise GraphError(f"layer {name!r} is missing parameter {p!r}")
        out.append(entry[p])
    return out


def _execute(graph, weights, x, mode, rng, capture):
    if mode not in ("train", "infer"):
        raise GraphError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != tuple(graph.input_shape):
        raise GraphError(f"input shape {x.shape[1:]} does not match graph input {graph.input_shape}")

    # free intermediates after their last consumer to bound peak memory
    last_use = {}
    for i, layer in enumerate(graph.layers):
        for inp in layer.inputs:
            last_use[inp] = i
    keep = set() if capture in (None, True) else set(capture)

    tensors = {GRAPH_INPUT: x}
    captured = {}
    for i, layer in enumerate(graph.layers):
        ins = [tensors[n] for n in layer.inputs]
        kind = layer.kind
        if kind == "conv2d":
            (kern,) = _layer_weights(weights, layer.name, "kernel")
            bias = weights[layer.name].get("bias")  # densely connected convs are bias-free
            out = conv2d_forward(ins[0], kern, bias,
                                 tuple(layer.params.get("stride", (1, 1))),
                                 layer.params.get("padding", "valid"))
        elif kind == "batchnorm":
            gamma, beta, mean, var = _layer_weights(weights, layer.name, "gamma", "beta", "mean", "var")
            out = batchnorm_forward(ins[0], gamma, beta, mean, var, graph.batchnorm_eps)
        elif kind == "relu":
            out = np.maximum(ins[0], np.float32(0.0))
        elif kind == "maxpool":
            out = pool_forward(ins[0], "max", tuple(layer.params["window"]), tuple(layer.params["stride"]))
        elif kind == "avgpool":
            out = pool_forward(ins[0], "avg", tuple(layer.params["window"]), tuple(layer.params["stride"]))
        elif kind == "concat":
            out = concat_channels(ins)
        elif kind == "global_avg_pool":
            out = global_avg_pool(ins[0])
        elif kind == "dense":
            weight, bias = _layer_weights(weights, layer.name, "weight", "bias")
            out = dense_forward(ins[0], weight, bias)
        elif kind == "dropout":
            if mode == "train":
                p = layer.params.get("p", 0.0)
                if p > 0.0:
                    if rng is None:
                        raise GraphError("training-mode forward with dropout needs an rng")
                    mask = (rng.random(ins[0].shape) >= p).astype(np.float32)
                    out = ins[0] * mask / np.float32(1.0 - p)
                else:
                    out = ins[0]
            else:
                out = ins[0]
        elif kind == "softmax":
            out = softmax(ins[0])
        else:  # unreachable: validate() catches unknown kinds
            raise GraphError(f"unknown layer kind {kind!r}")
        tensors[layer.name] = out
        if capture is True or layer.name in keep:
            captured[layer.name] = out
        for name in list(tensors):
            if last_use.get(name, len(graph.layers)) <= i and name != graph.layers[-1].name:
                if capture is True or name in keep:
                    continue
                del tensors[name]
    return tensors[graph.layers[-1].name], captured


def forward(graph, weights, x, mode="infer", rng=None):
    """Run the DAG; returns class probabilities (N, C)."""
    probs, _ = _execute(graph, weights, x, mode, rng, capture=None)
    return probs


def forward_with_activations(graph, weights, x, names=True, mode="infer", rng=None):
    """forward plus a dict of named intermediate outputs (names=True: all)."""
    return _execute(graph, weights, x, mode, rng, capture=names)


def extract_features(graph, weights, x):
    """Infer-mode backbone features (N, D) at the graph's head boundary."""
    if all(layer.name != graph.head_boundary for layer in graph.layers):
        raise GraphError(f"unknown head boundary {graph.head_boundary!r}")
    _, captured = _execute(graph, weights, x, "infer", None, capture=[graph.head_boundary])
    feats = captured[graph.head_boundary]
    if feats.ndim != 2:
        feats = feats.reshape(feats.shape[0], -1)
    return feats


def infer_shapes(graph) -> dict:
    """Propagate per-sample shapes (C,H,W) / (D,) through every layer."""
    shapes = {GRAPH_INPUT: tuple(graph.input_shape)}
    for layer in graph.layers:
        ins = [shapes[n] for n in layer.inputs]
        kind = layer.kind
        if kind == "conv2d":
            c, h, w = ins[0]
            sh, sw = layer.params.get("stride", (1, 1))
            kh, kw = layer.params["kernel"]
            if layer.params.get("padding", "valid") == "same":
                oh, ow = math.ceil(h / sh), math.ceil(w / sw)
            else:
                oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
            shapes[layer.name] = (layer.params["filters"], oh, ow)
        elif kind in ("batchnorm", "relu", "dropout", "softmax"):
            shapes[layer.name] = ins[0]
        elif kind in ("maxpool", "avgpool"):
            c, h, w = ins[0]
            kh, kw = layer.params["window"]
            sh, sw = layer.params["stride"]
            shapes[layer.name] = (c, (h - kh) // sh + 1, (w - kw) // sw + 1)
        elif kind == "concat":
            hw = {s[1:] for s in ins}
            if len(hw) != 1:
                raise GraphError(f"concat {layer.name!r} inputs disagree spatially: {ins}")
            shapes[layer.name] = (sum(s[0] for s in ins),) + ins[0][1:]
        elif kind == "global_avg_pool":
            shapes[layer.name] = (ins[0][0],)
        elif kind == "dense":
            shapes[layer.name] = (layer.params["units"],)
    return shapes


def _render_grid(maps: np.ndarray) -> np.ndarray:
    """Pack per-channel maps (C,H,W) into a uint8 grid, each map min-max
    normalized; constant maps render mid-gray."""
    c, h, w = maps.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i in range(c):
        m = maps[i].astype(np.float64)
        lo, hi = m.min(), m.max()
        if hi - lo < 1e-12:
            tile = np.full((h, w), 128, dtype=np.uint8)
        else:
            tile = np.round((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
        r, col = divmod(i, cols)
        grid[r * h : (r + 1) * h, col * w : (col + 1) * w] = tile
    return grid


def dump_activations(graph, weights, x, out_dir) -> list[str]:
    """Render every layer's output for a single image as grayscale PNG grids."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise GraphError(f"activation dumps need a single image, got batch of {x.shape[0]}")
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise GraphError(f"output directory {out_dir} is not writable")
    _, captured = _execute(graph, weights, x, "infer", None, capture=True)
    written = []
    for layer in graph.layers:
        out = captured[layer.name]
        maps = out[0][:, None, None] if out.ndim == 2 else out[0]
        grid = _render_grid(maps)
        fname = re.sub(r"[^A-Za-z0-9_.-]", "_", layer.name) + ".png"
        path = os.path.join(out_dir, fname)
        Image.fromarray(grid, mode="L").save(path)
        written.append(path)
    return written


def _he_kernel(gen, shape):
    fan_in = shape[1] * shape[2] * shape[3]
    return (gen.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def build_tiny_densenet(
    num_classes: int,
    seed: int = 0,
    input_size: int = 256,
    dropout_p: float = 0.2,
    head_init: str = "zero",
):
    """Reference densely connected backbone used throughout the test suite.

    Stem conv 3x3x16 (same) -> dense block of 4 layers (batchnorm-relu-conv
    3x3 growth 8, concat) -> transition (1x1 conv back to 16 channels + 2x2
    avgpool) -> second identical dense block -> global average pool (48
    features) -> dropout -> dense head -> softmax. Everything up to the
    pooled features is frozen; only the head is trainable.
    """
    gen = make_generator(seed)
    layers: list[LayerSpec] = []
    weights: WeightStore = {}

    def conv(name, inputs, cin, cout, k, padding="same"):
        layers.append(LayerSpec("conv2d", name, inputs,
                                {"filters": cout, "kernel": [k, k], "stride": [1, 1], "padding": padding}))
        weights[name] = {"kernel": _he_kernel(gen, (cout, cin, k, k))}

    def bn(name, inputs, c):
        layers.append(LayerSpec("batchnorm", name, inputs))
        weights[name] = {
            "gamma": np.ones(c, dtype=np.float32),
            "beta": np.zeros(c, dtype=np.float32),
            "mean": np.zeros(c, dtype=np.float32),
            "var": np.ones(c, dtype=np.float32),
        }

    def dense_block(prefix, current, channels, growth=8, depth=4):
        for i in range(1, depth + 1):
            bn(f"{prefix}n{i}", [current], channels)
            layers.append(LayerSpec("relu", f"{prefix}r{i}", [f"{prefix}n{i}"]))
            conv(f"{prefix}c{i}", [f"{prefix}r{i}"], channels, growth, 3)
            layers.append(LayerSpec("concat", f"{prefix}x{i}", [current, f"{prefix}c{i}"]))
            current = f"{prefix}x{i}"
            channels += growth
        return current, channels

    conv("stem", [GRAPH_INPUT], 3, 16, 3)
    current, channels = dense_block("b1", "stem", 16)
    conv("tconv", [current], channels, 16, 1)
    layers.append(LayerSpec("avgpool", "tpool", ["tconv"], {"window": [2, 2], "stride": [2, 2]}))
    current, channels = dense_block("b2", "tpool", 16)
    layers.append(LayerSpec("global_avg_pool", "features", [current]))
    layers.append(LayerSpec("dropout", "drop", ["features"], {"p": dropout_p}))
    layers.append(LayerSpec("dense", "head", ["drop"], {"units": num_classes}, trainable=True))
    layers.append(LayerSpec("softmax", "probs", ["head"]))

    if head_init == "zero":
        head_w = np.zeros((num_classes, channels), dtype=np.float32)
    elif head_init == "random":
        head_w = (gen.standard_normal((num_classes, channels)) * 0.01).astype(np.float32)
    else:
        raise GraphError(f"unknown head_init {head_init!r}")
    weights["head"] = {"weight": head_w, "bias": np.zeros(num_classes, dtype=np.float32)}

    graph = ModelGraph(
        name="tiny-densenet",
        input_shape=(3, input_size, input_size),
        layers=layers,
        head_boundary="features",
    )
    graph.validate()
    return graph, weights
