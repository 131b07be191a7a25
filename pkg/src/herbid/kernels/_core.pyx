# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: direct convolution, pooling, bilinear resize/warp.

Arithmetic contract matches herbid.kernels._numpy: convolution accumulates
in float32 (loop order n, o, y, then ci/ky/kx with x innermost), average
pooling accumulates in float64, and bilinear sampling blends in float64
(x then y) before casting to float32.
"""

from libc.math cimport floor as c_floor

import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

NAME = "cython"


def conv2d_direct(x, w, b, stride, padding):
    """Direct-loop cross-correlation of NCHW float32 input with OIHW kernels."""
    if x.dtype != np.float32 or w.dtype != np.float32:
        raise TypeError("conv2d expects float32 input and kernel")
    cdef Py_ssize_t n = x.shape[0], ci = x.shape[1]
    cdef Py_ssize_t co = w.shape[0], ci_k = w.shape[1]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    if ci != ci_k:
        raise ValueError(
            f"conv2d channel mismatch: input {tuple(x.shape)} has {ci} channels, "
            f"kernel {tuple(w.shape)} expects {ci_k}"
        )
    cdef Py_ssize_t sh = stride[0], sw = stride[1]
    cdef Py_ssize_t pt = padding[0], pb = padding[1], pl = padding[2], pr = padding[3]
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t hp = x.shape[2], wp = x.shape[3]
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    cdef Py_ssize_t oh = (hp - kh) // sh + 1
    cdef Py_ssize_t ow = (wp - kw) // sw + 1

    out_arr = np.empty((n, co, oh, ow), dtype=np.float32)
    bias_arr = np.zeros(co, dtype=np.float32) if b is None else np.ascontiguousarray(b, dtype=np.float32)

    cdef float[:, :, :, ::1] xv = x
    cdef float[:, :, :, ::1] wv = np.ascontiguousarray(w)
    cdef float[:, :, :, ::1] ov = out_arr
    cdef float[::1] bv = bias_arr

    cdef Py_ssize_t idx, i, o, oy, ox, c, ky, kx, base_y
    cdef float wval, bval
    cdef Py_ssize_t total = n * co

    with nogil:
        for idx in prange(total, schedule="static"):
            i = idx // co
            o = idx % co
            bval = bv[o]
            for oy in range(oh):
                base_y = oy * sh
                for ox in range(ow):
                    ov[i, o, oy, ox] = bval
                for c in range(ci):
                    for ky in range(kh):
                        for kx in range(kw):
                            wval = wv[o, c, ky, kx]
                            if sw == 1:
                                for ox in range(ow):
                                    ov[i, o, oy, ox] = ov[i, o, oy, ox] + xv[i, c, base_y + ky, ox + kx] * wval
                            else:
                                for ox in range(ow):
                                    ov[i, o, oy, ox] = ov[i, o, oy, ox] + xv[i, c, base_y + ky, ox * sw + kx] * wval
    return out_arr


def maxpool2d(x, window, stride):
    if x.dtype != np.float32:
        raise TypeError("maxpool expects float32 input")
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = window[0], kw = window[1], sh = stride[0], sw = stride[1]
    if kh > h or kw > w:
        raise ValueError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    cdef Py_ssize_t oh = (h - kh) // sh + 1
    cdef Py_ssize_t ow = (w - kw) // sw + 1
    out_arr = np.empty((n, c, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] xv = x
    cdef float[:, :, :, ::1] ov = out_arr
    cdef Py_ssize_t i, ch, oy, ox, ky, kx
    cdef float best, v
    with nogil:
        for i in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        best = xv[i, ch, oy * sh, ox * sw]
                        for ky in range(kh):
                            for kx in range(kw):
                                v = xv[i, ch, oy * sh + ky, ox * sw + kx]
                                if v > best:
                                    best = v
                        ov[i, ch, oy, ox] = best
    return out_arr


def avgpool2d(x, window, stride):
    if x.dtype != np.float32:
        raise TypeError("avgpool expects float32 input")
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t kh = window[0], kw = window[1], sh = stride[0], sw = stride[1]
    if kh > h or kw > w:
        raise ValueError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    cdef Py_ssize_t oh = (h - kh) // sh + 1
    cdef Py_ssize_t ow = (w - kw) // sw + 1
    out_arr = np.empty((n, c, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] xv = x
    cdef float[:, :, :, ::1] ov = out_arr
    cdef double inv = 1.0 / (kh * kw)
    cdef Py_ssize_t i, ch, oy, ox, ky, kx
    cdef double acc
    with nogil:
        for i in range(n):
            for ch in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        acc = 0.0
                        for ky in range(kh):
                            for kx in range(kw):
                                acc = acc + xv[i, ch, oy * sh + ky, ox * sw + kx]
                        ov[i, ch, oy, ox] = <float> (acc * inv)
    return out_arr


cdef inline double _tap(const float[:, :, ::1] img, Py_ssize_t ch, Py_ssize_t y, Py_ssize_t x,
                        Py_ssize_t h, Py_ssize_t w, double fill, bint use_fill) nogil:
    if use_fill and (y < 0 or y > h - 1 or x < 0 or x > w - 1):
        return fill
    if y < 0:
        y = 0
    elif y > h - 1:
        y = h - 1
    if x < 0:
        x = 0
    elif x > w - 1:
        x = w - 1
    return <double> img[ch, y, x]


def warp_bilinear(img, src_y, src_x, fill):
    """Sample a CHW float32 image at float64 coordinate grids.

    fill=None clamps coordinates (border replicate); a float substitutes
    that value for taps outside the image.
    """
    if img.dtype != np.float32:
        raise TypeError("warp expects float32 input")
    img = np.ascontiguousarray(img)
    src_y = np.ascontiguousarray(src_y, dtype=np.float64)
    src_x = np.ascontiguousarray(src_x, dtype=np.float64)
    if src_y.shape != src_x.shape:
        raise ValueError(f"coordinate grids disagree: {src_y.shape} vs {src_x.shape}")
    cdef Py_ssize_t c = img.shape[0], h = img.shape[1], w = img.shape[2]
    cdef Py_ssize_t oh = src_y.shape[0], ow = src_y.shape[1]
    out_arr = np.empty((c, oh, ow), dtype=np.float32)

    cdef float[:, :, ::1] iv = img
    cdef float[:, :, ::1] ov = out_arr
    cdef double[:, ::1] syv = src_y
    cdef double[:, ::1] sxv = src_x
    cdef bint use_fill = fill is not None
    cdef double fv = 0.0 if fill is None else <double> fill

    cdef Py_ssize_t ch, oy, ox, y0, x0
    cdef double sy, sx, fy, fx, t00, t01, t10, t11, top, bot
    with nogil:
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    sy = syv[oy, ox]
                    sx = sxv[oy, ox]
                    if use_fill:
                        # fully-outside coordinates are all-fill; clamp so the
                        # integer cast below cannot overflow
                        if sy < -2.0:
                            sy = -2.0
                        elif sy > h + 1.0:
                            sy = h + 1.0
                        if sx < -2.0:
                            sx = -2.0
                        elif sx > w + 1.0:
                            sx = w + 1.0
                    else:
                        if sy < 0.0:
                            sy = 0.0
                        elif sy > h - 1.0:
                            sy = h - 1.0
                        if sx < 0.0:
                            sx = 0.0
                        elif sx > w - 1.0:
                            sx = w - 1.0
                    fy = c_floor(sy)
                    fx = c_floor(sx)
                    y0 = <Py_ssize_t> fy
                    x0 = <Py_ssize_t> fx
                    fy = sy - fy
                    fx = sx - fx
                    t00 = _tap(iv, ch, y0, x0, h, w, fv, use_fill)
                    t01 = _tap(iv, ch, y0, x0 + 1, h, w, fv, use_fill)
                    t10 = _tap(iv, ch, y0 + 1, x0, h, w, fv, use_fill)
                    t11 = _tap(iv, ch, y0 + 1, x0 + 1, h, w, fv, use_fill)
                    top = t00 * (1.0 - fx) + t01 * fx
                    bot = t10 * (1.0 - fx) + t11 * fx
                    ov[ch, oy, ox] = <float> (top * (1.0 - fy) + bot * fy)
    return out_arr


def resize_bilinear(img, out_h, out_w):
    """Resize a CHW float32 image with corner-aligned bilinear sampling."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target {out_h}x{out_w} must be >= 1x1")
    cdef Py_ssize_t h = img.shape[1], w = img.shape[2]
    if out_h == 1:
        sy = np.zeros(1, dtype=np.float64)
    else:
        sy = np.arange(out_h, dtype=np.float64) * ((h - 1) / (out_h - 1))
    if out_w == 1:
        sx = np.zeros(1, dtype=np.float64)
    else:
        sx = np.arange(out_w, dtype=np.float64) * ((w - 1) / (out_w - 1))
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    return warp_bilinear(img, gy, gx, None)
