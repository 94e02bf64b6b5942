"""numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or disabled with
``UEEG_PURE_PYTHON=1``. Both backends share signatures and produce identical
shapes; results agree to floating-point rounding.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw):
    """(B, C, H, W) -> (B, C*kh*kw, Ho*Wo) with rows ordered (c, i, j)."""
    B, C, H, W = xp.shape
    ho, wo = H - kh + 1, W - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw):
    B, C, H, W = shape
    ho, wo = H - kh + 1, W - kw + 1
    c = cols.reshape(B, C, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + ho, j : j + wo] += c[:, :, i, j]
    return out


def maxpool_forward(x, ph, pw, sh, sw):
    """Return pooled values and, per output, the flat h*W+w index of the first maximum."""
    B, C, H, W = x.shape
    ho, wo = (H - ph) // sh + 1, (W - pw) // sw + 1
    win = sliding_window_view(x, (ph, pw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    flat = win.reshape(B, C, ho, wo, ph * pw)
    k = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, k[..., None], axis=-1)[..., 0]
    rows = (np.arange(ho) * sh)[:, None] + k // pw
    cols = (np.arange(wo) * sw)[None, :] + k % pw
    return np.ascontiguousarray(out), (rows * W + cols).astype(np.intp)


def maxpool_backward(g, argidx, shape):
    B, C, H, W = shape
    offsets = (np.arange(B * C) * (H * W)).reshape(B, C, 1, 1)
    dx = np.bincount((argidx + offsets).ravel(), weights=g.ravel(), minlength=B * C * H * W)
    return dx.astype(g.dtype, copy=False).reshape(shape)
