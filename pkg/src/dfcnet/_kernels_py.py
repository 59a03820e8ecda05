"""Pure-numpy im2col / col2im, used when the compiled extension is absent."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad, oh, ow):
    n, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (N, C, oh, ow, kh, kw) -> (N, C, kh, kw, oh, ow)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, oh * ow)


def col2im(cols, channels, h, w, kh, kw, stride, pad, oh, ow):
    n = cols.shape[0]
    cols = cols.reshape(n, channels, kh, kw, oh, ow)
    img = np.zeros((n, channels, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += cols[:, :, i, j]
    if pad:
        img = np.ascontiguousarray(img[:, :, pad:pad + h, pad:pad + w])
    return img
