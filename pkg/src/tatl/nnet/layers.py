"""Dense channels-last (N,H,W,C) layer primitives with hand-written backward passes.

Every ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
upstream gradient and that cache. Arrays are float64 throughout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError

MERGE_MODES = ("add", "concat")


def conv2d_fwd(x, kernel, bias):
    """Stride-1 cross-correlation with 'same' zero padding (odd square kernels).

    ``x`` is ``(N,H,W,C)``, ``kernel`` is ``(O,C,k,k)``, ``bias`` is ``(O,)``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects x (N,H,W,C) and kernel (O,C,k,k)")
    n, h, w, c = x.shape
    o, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"kernel expects {ck} input channels, x has {c}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError("kernel must be square with odd extent")
    if bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} != ({o},)")
    pad = kh // 2
    if pad:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
        xp[:, pad:pad + h, pad:pad + w] = x
        cols = np.empty((n, h, w, kh, kw, c))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + h, j:j + w, :]
        cols = cols.reshape(n * h * w, kh * kw * c)
    else:
        cols = x.reshape(n * h * w, c)
    kmat = kernel.transpose(0, 2, 3, 1).reshape(o, -1)
    y = cols @ kmat.T
    y += bias
    return y.reshape(n, h, w, o), (cols, kernel)


def conv2d_bwd(dy, cache):
    """Returns ``(dx, dkernel, dbias)``."""
    cols, kernel = cache
    o, c, kh, kw = kernel.shape
    dym = dy.reshape(-1, o)
    dkernel = (dym.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
    dbias = dym.sum(axis=0)
    # input gradient is the 'same' convolution with the flipped, transposed kernel
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = conv2d_fwd(dy, flipped, np.zeros(c))
    return dx, np.ascontiguousarray(dkernel), dbias


def relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def relu_bwd(dy, mask):
    return dy * mask


def sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_bwd(dy, out):
    return dy * out * (1.0 - out)


def downsample2x_fwd(x):
    """2x2 max pooling. Gradients route to the first maximum of each window."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max pooling needs even extents, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def downsample2x_bwd(dy, cache):
    idx, shape = cache
    n, h, w, c = shape
    dwin = np.zeros(dy.shape + (4,))
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def upsample2x_fwd(x):
    """Nearest-neighbour 2x upsampling."""
    return x.repeat(2, axis=1).repeat(2, axis=2), None


def upsample2x_bwd(dy, cache=None):
    n, h, w, c = dy.shape
    if h % 2 or w % 2:
        raise DimensionError(f"upsampling gradient needs even extents, got {h}x{w}")
    return dy.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def merge_fwd(skip, up, mode):
    """Combine an encoder skip tensor with an upsampled decoder tensor.

    ``concat`` stacks channels skip-first.
    """
    if mode == "add":
        if skip.shape != up.shape:
            raise DimensionError(f"add merge needs equal shapes, got {skip.shape} and {up.shape}")
        return skip + up, (mode, skip.shape[-1])
    if mode == "concat":
        if skip.shape[:-1] != up.shape[:-1]:
            raise DimensionError(f"concat merge needs equal batch/spatial extents, got {skip.shape} and {up.shape}")
        return np.concatenate([skip, up], axis=-1), (mode, skip.shape[-1])
    raise ValueError(f"merge mode must be one of {MERGE_MODES}, got {mode!r}")


def merge_bwd(dy, cache):
    """Returns ``(dskip, dup)``."""
    mode, c_skip = cache
    if mode == "add":
        return dy, dy
    return dy[..., :c_skip], dy[..., c_skip:]
