"""Pure-numpy kernels. Always importable; used when the compiled core is absent."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, padding):
    """Unfold ``x[N,C,H,W]`` into rows of ``C*k*k`` patch values.

    Returns an array of shape ``[N*Ho*Wo, C*k*k]`` with the column order
    (c, ki, kj), matching ``weight.reshape(Cout, -1)``.
    """
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = h + 2 * padding - k + 1
    wo = w + 2 * padding - k + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # N,C,Ho,Wo,k,k
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols, x_shape, k, padding):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into an image."""
    n, c, h, w = x_shape
    ho = h + 2 * padding - k + 1
    wo = w + 2 * padding - k + 1
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(out)


def _windows(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def pool_argmax(x):
    """Index (0..3, row-major in the 2x2 window) of the first maximum."""
    return np.argmax(_windows(x), axis=-1).astype(np.uint8)


def pool_gather(x, idx):
    win = _windows(x)
    return np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0].copy()


def pool_scatter(g, idx):
    n, c, ho, wo = g.shape
    win = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    return np.ascontiguousarray(
        win.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo))
