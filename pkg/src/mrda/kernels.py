"""Numeric hot loops, each with a numba and a pure-numpy implementation.

The public functions dispatch on :func:`mrda.accel.jit_enabled`.  Both paths
compute the same sums; they agree to floating-point reassociation error.
"""

import numpy as np

from . import accel
from .accel import njit


@njit(cache=False, fastmath=False)
def _blur_subsample_jit(padded, kernel, scale, out_h, out_w):
    channels = padded.shape[2]
    kh, kw = kernel.shape
    out = np.zeros((out_h, out_w, channels))
    for i in range(out_h):
        y0 = i * scale
        for j in range(out_w):
            x0 = j * scale
            for c in range(channels):
                acc = 0.0
                for u in range(kh):
                    for v in range(kw):
                        acc += padded[y0 + u, x0 + v, c] * kernel[u, v]
                out[i, j, c] = acc
    return out


def _blur_subsample_numpy(padded, kernel, scale, out_h, out_w):
    kh, kw = kernel.shape
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
    windows = windows[: (out_h - 1) * scale + 1 : scale, : (out_w - 1) * scale + 1 : scale]
    return np.einsum("ijcuv,uv->ijc", windows, kernel)


def blur_subsample(padded, kernel, scale, out_h, out_w):
    """Strided correlation of a padded H×W×C image with a 2-D kernel.

    Only the output pixels kept by the subsampling are computed:
    ``out[i, j, c] = sum_{u,v} padded[i*scale + u, j*scale + v, c] * kernel[u, v]``.
    """
    padded = np.ascontiguousarray(padded, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if accel.jit_enabled():
        return _blur_subsample_jit(padded, kernel, int(scale), int(out_h), int(out_w))
    return _blur_subsample_numpy(padded, kernel, int(scale), int(out_h), int(out_w))


@njit(cache=False, fastmath=False)
def _filter_valid_jit(img, taps):
    n = taps.shape[0]
    h, w = img.shape
    oh = h - n + 1
    ow = w - n + 1
    rows = np.zeros((h, ow))
    for y in range(h):
        for x in range(ow):
            acc = 0.0
            for t in range(n):
                acc += img[y, x + t] * taps[t]
            rows[y, x] = acc
    out = np.zeros((oh, ow))
    for y in range(oh):
        for x in range(ow):
            acc = 0.0
            for t in range(n):
                acc += rows[y + t, x] * taps[t]
            out[y, x] = acc
    return out


def _filter_valid_numpy(img, taps):
    n = taps.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, n, axis=1) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, n, axis=0) @ taps


def filter_valid_separable(img, taps):
    """'Valid'-mode separable filtering of a 2-D array with symmetric 1-D taps."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    taps = np.ascontiguousarray(taps, dtype=np.float64)
    if img.shape[0] < taps.shape[0] or img.shape[1] < taps.shape[0]:
        raise ValueError(f"image {img.shape} smaller than filter length {taps.shape[0]}")
    if accel.jit_enabled():
        return _filter_valid_jit(img, taps)
    return _filter_valid_numpy(img, taps)
