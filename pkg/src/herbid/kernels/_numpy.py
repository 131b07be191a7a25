"""Pure-NumPy implementations of the hot image/convolution kernels.

This is the fallback backend used when the compiled extension is not
available (HERBID_KERNELS=python forces it). Both backends follow the same
arithmetic contract so results agree bit-for-bit where the operation is
exact (identity resizes, integer-coordinate warps) and to float32 rounding
elsewhere:

* convolution is cross-correlation (no kernel flip), float32 accumulation
* bilinear sampling computes coordinates and blend weights in float64,
  blends x-then-y, and casts the result to float32
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def _check_f32(x: np.ndarray, what: str) -> np.ndarray:
    if x.dtype != np.float32:
        raise TypeError(f"{what} must be float32, got {x.dtype}")
    return np.ascontiguousarray(x)


def conv2d(x, w, b, stride, padding):
    """Cross-correlate NCHW input with OIHW kernels.

    stride is (sh, sw); padding is explicit (top, bottom, left, right).
    Implemented as per-sample im2col + BLAS matmul, which wins over direct
    loops at the channel counts the runtime uses (see benchmarks).
    """
    x = _check_f32(x, "conv2d input")
    w = _check_f32(w, "conv2d kernel")
    n, ci, h, wi = x.shape
    co, ci_k, kh, kw = w.shape
    if ci != ci_k:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} has {ci} channels, "
            f"kernel {w.shape} expects {ci_k}"
        )
    sh, sw = stride
    pt, pb, pl, pr = padding
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    hp, wp = h + pt + pb, wi + pl + pr
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1

    wmat = w.reshape(co, ci * kh * kw)
    out = np.empty((n, co, oh, ow), dtype=np.float32)
    for i in range(n):
        cols = np.lib.stride_tricks.sliding_window_view(x[i], (kh, kw), axis=(1, 2))
        cols = cols[:, ::sh, ::sw, :, :]  # (ci, oh, ow, kh, kw)
        cols = cols.transpose(0, 3, 4, 1, 2).reshape(ci * kh * kw, oh * ow)
        out[i] = (wmat @ cols).reshape(co, oh, ow)
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return out


def _pool_windows(x, window, stride):
    kh, kw = window
    sh, sw = stride
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ValueError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v[:, :, ::sh, ::sw, :, :]


def maxpool2d(x, window, stride):
    x = _check_f32(x, "maxpool input")
    return np.ascontiguousarray(_pool_windows(x, window, stride).max(axis=(4, 5)))


def avgpool2d(x, window, stride):
    x = _check_f32(x, "avgpool input")
    v = _pool_windows(x, window, stride)
    return (v.sum(axis=(4, 5), dtype=np.float64) / (window[0] * window[1])).astype(np.float32)


def _source_axis(out_len: int, in_len: int) -> np.ndarray:
    # corner-aligned sampling: first/last output samples hit first/last input samples
    if out_len == 1:
        return np.zeros(1, dtype=np.float64)
    scale = (in_len - 1) / (out_len - 1)
    return np.arange(out_len, dtype=np.float64) * scale


def resize_bilinear(img, out_h, out_w):
    """Resize a CHW float32 image with corner-aligned bilinear sampling."""
    img = _check_f32(img, "resize input")
    c, h, w = img.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target {out_h}x{out_w} must be >= 1x1")
    sy = _source_axis(out_h, h)
    sx = _source_axis(out_w, w)
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    return warp_bilinear(img, gy, gx, fill=None)


def warp_bilinear(img, src_y, src_x, fill):
    """Sample a CHW float32 image at float64 coordinate grids.

    fill=None clamps coordinates to the image rect (border replicate);
    a float fill substitutes that value for taps outside the image.
    """
    img = _check_f32(img, "warp input")
    c, h, w = img.shape
    src_y = np.asarray(src_y, dtype=np.float64)
    src_x = np.asarray(src_x, dtype=np.float64)
    if src_y.shape != src_x.shape:
        raise ValueError(f"coordinate grids disagree: {src_y.shape} vs {src_x.shape}")

    if fill is None:
        src_y = np.clip(src_y, 0.0, h - 1.0)
        src_x = np.clip(src_x, 0.0, w - 1.0)
    else:
        # fully-outside coordinates are all-fill; clamp so the integer cast
        # below cannot overflow
        src_y = np.clip(src_y, -2.0, h + 1.0)
        src_x = np.clip(src_x, -2.0, w + 1.0)

    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    fy = src_y - y0
    fx = src_x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1

    if fill is None:
        y0c = np.clip(y0, 0, h - 1)
        y1c = np.clip(y1, 0, h - 1)
        x0c = np.clip(x0, 0, w - 1)
        x1c = np.clip(x1, 0, w - 1)
        out = np.empty((c,) + src_y.shape, dtype=np.float32)
        for ch in range(c):
            plane = img[ch].astype(np.float64)
            top = plane[y0c, x0c] * (1.0 - fx) + plane[y0c, x1c] * fx
            bot = plane[y1c, x0c] * (1.0 - fx) + plane[y1c, x1c] * fx
            out[ch] = (top * (1.0 - fy) + bot * fy).astype(np.float32)
        return out

    fv = float(fill)
    in_y0 = (y0 >= 0) & (y0 <= h - 1)
    in_y1 = (y1 >= 0) & (y1 <= h - 1)
    in_x0 = (x0 >= 0) & (x0 <= w - 1)
    in_x1 = (x1 >= 0) & (x1 <= w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x1, 0, w - 1)
    out = np.empty((c,) + src_y.shape, dtype=np.float32)
    for ch in range(c):
        plane = img[ch].astype(np.float64)
        t00 = np.where(in_y0 & in_x0, plane[y0c, x0c], fv)
        t01 = np.where(in_y0 & in_x1, plane[y0c, x1c], fv)
        t10 = np.where(in_y1 & in_x0, plane[y1c, x0c], fv)
        t11 = np.where(in_y1 & in_x1, plane[y1c, x1c], fv)
        top = t00 * (1.0 - fx) + t01 * fx
        bot = t10 * (1.0 - fx) + t11 * fx
        out[ch] = (top * (1.0 - fy) + bot * fy).astype(np.float32)
    return out
