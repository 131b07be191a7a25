"""Kernel backend selection.

Two interchangeable backends provide the hot array kernels:

* ``cython`` — the compiled extension ``herbid.kernels._core`` (pooling and
  bilinear resampling run as C loops; convolution routes between the direct
  C loop and the BLAS im2col path depending on the reduction size, a split
  calibrated by ``benchmarks/bench_kernels.py``)
* ``python`` — pure NumPy (``herbid.kernels._numpy``)

The compiled backend is picked at import when the extension is available.
Set HERBID_KERNELS=python or HERBID_KERNELS=cython to force one.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

from . import _numpy

try:
    from . import _core
except ImportError:  # extension not built; fall back silently
    _core = None

def _cython_conv2d(x, w, b, stride, padding):
    # For 1x1 kernels im2col degenerates to a plain reshape and the BLAS
    # matmul wins; everywhere else the direct C loop is faster (benchmarked).
    if w.shape[2] == 1 and w.shape[3] == 1:
        return _numpy.conv2d(x, w, b, stride, padding)
    return _core.conv2d_direct(x, w, b, stride, padding)


def _make_backend(name: str) -> SimpleNamespace:
    if name == "python":
        mod = _numpy
        conv = _numpy.conv2d
    elif name == "cython":
        if _core is None:
            raise RuntimeError("compiled kernel extension is not available")
        mod = _core
        conv = _cython_conv2d
    else:
        raise ValueError(f"unknown kernel backend {name!r} (use 'python' or 'cython')")
    return SimpleNamespace(
        name=name,
        conv2d=conv,
        conv2d_direct=_core.conv2d_direct if name == "cython" else _numpy.conv2d,
        maxpool2d=mod.maxpool2d,
        avgpool2d=mod.avgpool2d,
        resize_bilinear=mod.resize_bilinear,
        warp_bilinear=mod.warp_bilinear,
    )


def available_backends() -> list[str]:
    return ["python", "cython"] if _core is not None else ["python"]


def get_backend(name: str) -> SimpleNamespace:
    return _make_backend(name)


_requested = os.environ.get("HERBID_KERNELS", "").strip().lower()
if _requested:
    _active = _make_backend(_requested)
else:
    _active = _make_backend("cython" if _core is not None else "python")

BACKEND = _active.name
conv2d = _active.conv2d
maxpool2d = _active.maxpool2d
avgpool2d = _active.avgpool2d
resize_bilinear = _active.resize_bilinear
warp_bilinear = _active.warp_bilinear
