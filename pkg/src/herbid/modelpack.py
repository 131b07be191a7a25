"""Compact single-file model package for offline inference.

Layout (all integers little-endian):

    magic "HMP1" | u32 version=1 | u64 header_json_length | UTF-8 header
    JSON | zero padding to 64 | tensor blobs, each starting 64-aligned

The header JSON carries the graph description, class labels, quantization
mode, batchnorm epsilon, and the tensor table (name, dtype, shape, offset,
length, CRC-32, and scale/zero_point for int8 entries). A package is
sufficient for prediction with no side files.

Quantization: f16 rounds to nearest even; int8 is per-tensor affine with
scale = (max-min)/255 and the zero point chosen so the minimum maps to
-128, which bounds the dequantization error by scale/2 per element.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .nnrt import GraphError, ModelGraph, forward, infer_shapes
from .seeding import make_generator

MAGIC = b"HMP1"
VERSION = 1
ALIGN = 64
QUANT_MODES = ("none", "f16", "i8")
_QUANT_ALIASES = {"i8_per_tensor_affine": "i8"}
_DTYPE_SIZE = {"f32": 4, "f16": 2, "i8": 1}
_PARAM_ORDER = {
    "conv2d": ("kernel", "bias"),
    "batchnorm": ("gamma", "beta", "mean", "var"),
    "dense": ("weight", "bias"),
}
_OPTIONAL_PARAMS = {("conv2d", "bias")}


class PackageError(Exception):
    """Any structural problem with package bytes (bad magic, truncation,
    malformed header, offsets outside the file, shape disagreement)."""


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def quantize_tensor(t: np.ndarray, mode: str):
    """Encode a float32 tensor; returns (payload bytes, entry fields, flags)."""
    mode = _QUANT_ALIASES.get(mode, mode)
    t = np.ascontiguousarray(t, dtype=np.float32)
    if not np.all(np.isfinite(t)):
        raise PackageError("cannot quantize non-finite tensor values")
    flags: list[str] = []
    if mode == "none" or mode == "f32":
        return t.astype("<f4").tobytes(), {"dtype": "f32"}, flags
    if mode == "f16":
        return t.astype("<f2").tobytes(), {"dtype": "f16"}, flags
    if mode == "i8":
        lo, hi = float(t.min()), float(t.max())
        scale = (hi - lo) / 255.0
        if scale < 1e-12:
            scale = 1e-12
            flags.append("constant tensor; scale floored at 1e-12")
        zero_point = int(round(-128.0 - lo / scale))
        q = np.clip(np.rint(t / np.float64(scale)) + zero_point, -128, 127).astype(np.int8)
        return q.tobytes(), {"dtype": "i8", "scale": scale, "zero_point": zero_point}, flags
    raise PackageError(f"unknown quantization mode {mode!r}")


def dequantize(entry: dict, payload: bytes) -> np.ndarray:
    shape = tuple(entry["shape"])
    dtype = entry["dtype"]
    if dtype == "f32":
        return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if dtype == "f16":
        return np.frombuffer(payload, dtype="<f2").reshape(shape).astype(np.float32)
    if dtype == "i8":
        q = np.frombuffer(payload, dtype=np.int8).reshape(shape)
        return ((q.astype(np.float64) - entry["zero_point"]) * entry["scale"]).astype(np.float32)
    raise PackageError(f"unknown tensor dtype {dtype!r}")


def _head_dense_layer(graph: ModelGraph):
    final = graph.layers[-1]
    producer = graph.layer(final.inputs[0])
    if producer.kind != "dense":
        raise PackageError(f"softmax input {producer.name!r} is not a dense layer")
    return producer


def _expected_param_shapes(graph: ModelGraph) -> dict:
    shapes = infer_shapes(graph)
    expected: dict[str, dict[str, tuple]] = {}
    for layer in graph.layers:
        if layer.kind == "conv2d":
            cin = shapes[layer.inputs[0]][0]
            kh, kw = layer.params["kernel"]
            f = layer.params["filters"]
            expected[layer.name] = {"kernel": (f, cin, kh, kw), "bias": (f,)}
        elif layer.kind == "batchnorm":
            c = shapes[layer.inputs[0]][0]
            expected[layer.name] = {p: (c,) for p in _PARAM_ORDER["batchnorm"]}
        elif layer.kind == "dense":
            din = shapes[layer.inputs[0]][0]
            expected[layer.name] = {"weight": (layer.params["units"], din), "bias": (layer.params["units"],)}
    return expected


def serialize(graph: ModelGraph, weights: dict, head=None, labels=None,
              quantization: str = "none") -> bytes:
    """Pack graph + weights (+ trained head + class labels) into bytes."""
    quantization = _QUANT_ALIASES.get(quantization, quantization)
    if quantization not in QUANT_MODES:
        raise PackageError(f"unknown quantization mode {quantization!r}")
    graph.validate()
    head_layer = _head_dense_layer(graph)
    store = {name: dict(params) for name, params in weights.items()}
    if head is not None:
        store[head_layer.name] = {
            "weight": np.asarray(head.weight, dtype=np.float32),
            "bias": np.asarray(head.bias, dtype=np.float32),
        }
    labels = list(labels or [])
    head_width = head_layer.params["units"]
    if len(labels) != head_width:
        raise PackageError(f"{len(labels)} class labels for a {head_width}-way head")

    expected = _expected_param_shapes(graph)
    table = []
    payloads = []
    flags: list[str] = []
    for layer in graph.layers:
        if layer.name not in expected:
            continue
        entry_params = store.get(layer.name)
        if entry_params is None:
            raise PackageError(f"missing weights for layer {layer.name!r}")
        for pname in _PARAM_ORDER[layer.kind]:
            if pname not in entry_params:
                if (layer.kind, pname) in _OPTIONAL_PARAMS:
                    continue
                raise PackageError(f"layer {layer.name!r} is missing parameter {pname!r}")
            t = np.asarray(entry_params[pname], dtype=np.float32)
            want = expected[layer.name][pname]
            if t.shape != want:
                raise PackageError(
                    f"tensor {layer.name}/{pname} has shape {t.shape}, graph expects {want}"
                )
            payload, extra, qflags = quantize_tensor(t, quantization)
            flags += [f"{layer.name}/{pname}: {f}" for f in qflags]
            entry = {
                "name": f"{layer.name}/{pname}",
                "shape": list(t.shape),
                "byte_length": len(payload),
                "crc32": zlib.crc32(payload),
                **extra,
            }
            table.append(entry)
            payloads.append(payload)

    header = {
        "graph": graph.to_dict(),
        "class_labels": labels,
        "quantization": quantization,
        "batchnorm_epsilon": graph.batchnorm_eps,
        "tensor_table": table,
    }
    if flags:
        header["flags"] = flags
    # offsets depend on the header length, which depends on the offsets'
    # digit counts; iterate until stable
    for _ in range(8):
        header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
        data_start = _align(16 + len(header_bytes))
        offset = data_start
        changed = False
        for entry, payload in zip(table, payloads):
            if entry.get("byte_offset") != offset:
                entry["byte_offset"] = offset
                changed = True
            offset += _align(len(payload))
        if not changed:
            break
    else:
        raise PackageError("tensor table offsets failed to stabilize")

    blob = bytearray()
    blob += MAGIC
    blob += VERSION.to_bytes(4, "little")
    blob += len(header_bytes).to_bytes(8, "little")
    blob += header_bytes
    blob += b"\x00" * (data_start - 16 - len(header_bytes))
    for payload in payloads:
        blob += payload
        blob += b"\x00" * (_align(len(payload)) - len(payload))
    return bytes(blob)


@dataclass
class ModelPackage:
    graph: ModelGraph
    weights: dict
    class_labels: list[str]
    quantization: str
    batchnorm_eps: float
    checksum_failures: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)


def deserialize(data: bytes) -> ModelPackage:
    """Parse package bytes; every malformation raises PackageError, blob
    checksum mismatches are reported on the returned package instead."""
    try:
        return _deserialize(data)
    except PackageError:
        raise
    except Exception as exc:  # totality: arbitrary bytes must not crash
        raise PackageError(f"malformed package: {exc}") from exc


def _deserialize(data: bytes) -> ModelPackage:
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise PackageError("package must be a byte string")
    data = bytes(data)
    if len(data) < 16:
        raise PackageError(f"package truncated: {len(data)} bytes, need at least 16")
    if data[:4] != MAGIC:
        raise PackageError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version = int.from_bytes(data[4:8], "little")
    if version != VERSION:
        raise PackageError(f"unsupported package version {version}")
    header_len = int.from_bytes(data[8:16], "little")
    if 16 + header_len > len(data):
        raise PackageError(f"header length {header_len} exceeds file size {len(data)}")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PackageError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise PackageError("header JSON must be an object")

    for key in ("graph", "class_labels", "quantization", "batchnorm_epsilon", "tensor_table"):
        if key not in header:
            raise PackageError(f"header is missing {key!r}")
    quantization = header["quantization"]
    if quantization not in QUANT_MODES:
        raise PackageError(f"unknown quantization mode {quantization!r}")
    labels = header["class_labels"]
    if not isinstance(labels, list) or not all(isinstance(l, str) for l in labels):
        raise PackageError("class_labels must be a list of strings")
    try:
        graph = ModelGraph.from_dict(header["graph"])
    except (GraphError, KeyError, TypeError, ValueError) as exc:
        raise PackageError(f"invalid graph description: {exc}") from exc
    graph.batchnorm_eps = float(header["batchnorm_epsilon"])

    head_layer = _head_dense_layer(graph)
    if len(labels) != head_layer.params["units"]:
        raise PackageError(
            f"{len(labels)} class labels for a {head_layer.params['units']}-way head"
        )

    expected = _expected_param_shapes(graph)
    table = header["tensor_table"]
    if not isinstance(table, list):
        raise PackageError("tensor_table must be a list")
    weights: dict[str, dict[str, np.ndarray]] = {}
    checksum_failures: list[str] = []
    seen = set()
    for entry in table:
        if not isinstance(entry, dict):
            raise PackageError("tensor_table entries must be objects")
        for key in ("name", "dtype", "shape", "byte_offset", "byte_length", "crc32"):
            if key not in entry:
                raise PackageError(f"tensor entry missing {key!r}")
        name = entry["name"]
        if not isinstance(name, str) or "/" not in name:
            raise PackageError(f"bad tensor name {name!r}")
        if name in seen:
            raise PackageError(f"duplicate tensor {name!r}")
        seen.add(name)
        layer_name, param = name.split("/", 1)
        if layer_name not in expected or param not in expected[layer_name]:
            raise PackageError(f"tensor {name!r} does not belong to the graph")
        shape = entry["shape"]
        if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
            raise PackageError(f"tensor {name!r} has a bad shape {shape!r}")
        if tuple(shape) != expected[layer_name][param]:
            raise PackageError(
                f"tensor {name!r} has shape {tuple(shape)}, graph expects {expected[layer_name][param]}"
            )
        dtype = entry["dtype"]
        if dtype not in _DTYPE_SIZE:
            raise PackageError(f"tensor {name!r} has unknown dtype {dtype!r}")
        if dtype == "i8":
            if "scale" not in entry or "zero_point" not in entry:
                raise PackageError(f"int8 tensor {name!r} is missing scale/zero_point")
            if not isinstance(entry["scale"], (int, float)) or entry["scale"] <= 0:
                raise PackageError(f"int8 tensor {name!r} has non-positive scale")
        count = math.prod(shape)
        offset, length = entry["byte_offset"], entry["byte_length"]
        if not isinstance(offset, int) or not isinstance(length, int):
            raise PackageError(f"tensor {name!r} offsets must be integers")
        if length != count * _DTYPE_SIZE[dtype]:
            raise PackageError(
                f"tensor {name!r} byte_length {length} does not match shape {shape} ({dtype})"
            )
        if offset % ALIGN != 0:
            raise PackageError(f"tensor {name!r} offset {offset} is not {ALIGN}-aligned")
        if offset < 16 + header_len or offset + length > len(data):
            raise PackageError(f"tensor {name!r} lies outside the file")
        payload = data[offset : offset + length]
        if zlib.crc32(payload) != entry["crc32"]:
            checksum_failures.append(name)
        weights.setdefault(layer_name, {})[param] = dequantize(entry, payload)

    for layer_name, params in expected.items():
        kind = graph.layer(layer_name).kind
        for param in params:
            if (kind, param) in _OPTIONAL_PARAMS:
                continue
            if layer_name not in weights or param not in weights[layer_name]:
                raise PackageError(f"package is missing tensor {layer_name}/{param}")

    return ModelPackage(
        graph=graph,
        weights=weights,
        class_labels=labels,
        quantization=quantization,
        batchnorm_eps=graph.batchnorm_eps,
        checksum_failures=checksum_failures,
        flags=list(header.get("flags", [])),
    )


def save_package(data: bytes, path) -> None:
    with open(path, "wb") as f:
        f.write(data)


def load_package(path) -> ModelPackage:
    with open(path, "rb") as f:
        return deserialize(f.read())


@dataclass
class VerificationReport:
    probes: int
    max_abs_deviation: float
    top1_agreement: float
    checksum_failures: list[str]

    def to_dict(self) -> dict:
        return {
            "probes": self.probes,
            "max_abs_deviation": self.max_abs_deviation,
            "top1_agreement": self.top1_agreement,
            "checksum_failures": list(self.checksum_failures),
        }


def verify_package(graph: ModelGraph, weights: dict, package_bytes: bytes,
                   probes: int = 10, seed: int = 0, batch: int = 4) -> VerificationReport:
    """Run random probe inputs through the original model and the
    deserialized package; report probability deviation and top-1 agreement."""
    pkg = deserialize(package_bytes)
    gen = make_generator(seed)
    max_dev = 0.0
    agree = 0
    done = 0
    while done < probes:
        n = min(batch, probes - done)
        x = gen.random((n,) + tuple(graph.input_shape), dtype=np.float32)
        p_orig = forward(graph, weights, x)
        p_pkg = forward(pkg.graph, pkg.weights, x)
        max_dev = max(max_dev, float(np.abs(p_orig - p_pkg).max()))
        agree += int((p_orig.argmax(axis=1) == p_pkg.argmax(axis=1)).sum())
        done += n
    return VerificationReport(
        probes=probes,
        max_abs_deviation=max_dev,
        top1_agreement=agree / probes,
        checksum_failures=pkg.checksum_failures,
    )
