# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im kernels with zero padding folded in.

col2im visits kernel offsets in the same (i, j) order as the numpy fallback
in ``_kernels_py``, so every output element accumulates its terms in the same
sequence and the two backends agree bit-for-bit.
"""
import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy, memset

ctypedef fused real:
    float
    double


cdef inline void _axpy1(real* dst, const real* src, int count) noexcept nogil:
    cdef int k
    for k in range(count):
        dst[k] += src[k]


cdef void _im2col_plane(const real* src, real* dst, int h, int w, int kh, int kw,
                        int stride, int pad, int oh, int ow) noexcept nogil:
    cdef int i, j, y, xx, sy, sx, lo, hi
    cdef real* row
    cdef const real* srow
    for i in range(kh):
        for j in range(kw):
            row = dst + (i * kw + j) * oh * ow
            # valid output columns: 0 <= xx*stride + j - pad < w
            lo = 0
            while lo < ow and lo * stride + j - pad < 0:
                lo += 1
            hi = ow
            while hi > lo and (hi - 1) * stride + j - pad >= w:
                hi -= 1
            for y in range(oh):
                sy = y * stride + i - pad
                if sy < 0 or sy >= h:
                    memset(row + y * ow, 0, ow * sizeof(real))
                    continue
                srow = src + sy * w
                for xx in range(lo):
                    row[y * ow + xx] = 0
                sx = lo * stride + j - pad
                if stride == 1:
                    memcpy(row + y * ow + lo, srow + sx, (hi - lo) * sizeof(real))
                else:
                    for xx in range(lo, hi):
                        row[y * ow + xx] = srow[sx]
                        sx += stride
                for xx in range(hi, ow):
                    row[y * ow + xx] = 0


cdef void _col2im_plane(const real* src, real* dst, int h, int w, int kh, int kw,
                        int stride, int pad, int oh, int ow) noexcept nogil:
    cdef int i, j, y, xx, sy, sx, lo, hi
    cdef const real* row
    cdef real* drow
    for i in range(kh):
        for j in range(kw):
            row = src + (i * kw + j) * oh * ow
            lo = 0
            while lo < ow and lo * stride + j - pad < 0:
                lo += 1
            hi = ow
            while hi > lo and (hi - 1) * stride + j - pad >= w:
                hi -= 1
            for y in range(oh):
                sy = y * stride + i - pad
                if sy < 0 or sy >= h:
                    continue
                drow = dst + sy * w
                sx = lo * stride + j - pad
                if stride == 1:
                    _axpy1(drow + sx, row + y * ow + lo, hi - lo)
                else:
                    for xx in range(lo, hi):
                        drow[sx] += row[y * ow + xx]
                        sx += stride


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int stride, int pad, int oh, int ow):
    """(N, C, H, W) -> (N, C*kh*kw, oh*ow) columns of the zero-padded input."""
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1]
    cdef int h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t n, c
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n_batch, channels * kh * kw, oh * ow), dtype=dtype)
    cdef real[:, :, ::1] cols = out
    if n_batch == 0 or channels == 0:
        return out
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                _im2col_plane(&x[n, c, 0, 0], &cols[n, c * kh * kw, 0], h, w, kh, kw, stride, pad, oh, ow)
    return out


def col2im(const real[:, :, ::1] cols, int channels, int h, int w,
           int kh, int kw, int stride, int pad, int oh, int ow):
    """Adjoint of im2col: scatter-add columns into an (N, C, h, w) image, dropping padding."""
    cdef Py_ssize_t n_batch = cols.shape[0]
    cdef Py_ssize_t n, c
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n_batch, channels, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] img = out
    if n_batch == 0 or channels == 0:
        return out
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                _col2im_plane(&cols[n, c * kh * kw, 0], &img[n, c, 0, 0], h, w, kh, kw, stride, pad, oh, ow)
    return out
