"""Layer primitives.

Each layer is a function ``layer(x, params, ...)`` over :class:`Tensor` values
plus a ``*_params`` constructor that allocates Glorot-uniform weights and zero
biases from a caller-supplied generator. Convolutions are cross-correlations
(no kernel flip) with stride 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import (
    BatchTooSmall,
    EmptySequence,
    InvalidProbability,
    KernelLargerThanInput,
    ShapeMismatch,
    WindowLargerThanInput,
)
from .tensor import Tensor, add, get_default_dtype, matmul, note_branch, record, relu

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class LayerParams:
    """Weights, hyper-parameters and (for batchnorm) running statistics of one layer."""

    kind: str
    weights: dict[str, Tensor] = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    dtype = get_default_dtype()
    u = rng.random(size=shape, dtype=dtype)
    return Tensor(u * dtype.type(2 * limit) - dtype.type(limit), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


# ---------------------------------------------------------------------------
# padding


def resolve_padding(size: int, k: int, mode: str = "valid", axis_name: str = "") -> tuple[int, int]:
    """Padding (before, after) for one spatial axis.

    ``"auto"`` means valid unless the output would fall below one element, in
    which case same padding is used and a message is logged.
    """
    if mode == "auto":
        if size - k + 1 >= 1:
            return (0, 0)
        log.info("kernel %d exceeds %s size %d: using same padding", k, axis_name or "axis", size)
        mode = "same"
    if mode == "valid":
        return (0, 0)
    if mode == "same":
        before = (k - 1) // 2
        return (before, k - 1 - before)
    raise ValueError(f"unknown padding mode {mode!r}")


def _pads(hyper: dict) -> tuple[tuple[int, int], tuple[int, int]]:
    p = hyper.get("padding", ((0, 0), (0, 0)))
    return tuple(tuple(int(v) for v in pair) for pair in p)


# ---------------------------------------------------------------------------
# convolution core (arrays in, arrays out)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, pads):
    (pt, pb), (pl, pr) = pads
    if pt or pb or pl or pr:
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x
    f, c, kh, kw = w.shape
    B, _, H, W = xp.shape
    if kh > H or kw > W:
        raise KernelLargerThanInput(f"kernel ({kh},{kw}) larger than input ({H},{W})")
    ho, wo = H - kh + 1, W - kw + 1
    cols = _kernels.im2col(xp, kh, kw)
    wm = w.reshape(f, c * kh * kw)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b[:, None]
    return out.reshape(B, f, ho, wo), (cols, xp.shape)


def _conv_backward(g: np.ndarray, w: np.ndarray, cache, pads, need_dx: bool):
    cols, xp_shape = cache
    f, c, kh, kw = w.shape
    B = g.shape[0]
    gm = g.reshape(B, f, -1)
    dw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = gm.sum(axis=(0, 2))
    dx = None
    if need_dx:
        dcols = np.matmul(w.reshape(f, -1).T, gm)
        dxp = _kernels.col2im(dcols, xp_shape, kh, kw)
        (pt, pb), (pl, pr) = pads
        dx = dxp[:, :, pt : xp_shape[2] - pb, pl : xp_shape[3] - pr]
    return dx, dw, db


# ---------------------------------------------------------------------------
# conv2d / conv1d / depthwise


def conv2d_params(in_channels, filters, kernel, rng, padding=((0, 0), (0, 0))) -> LayerParams:
    kh, kw = kernel
    w = glorot_uniform(
        (filters, in_channels, kh, kw), in_channels * kh * kw, filters * kh * kw, rng
    )
    return LayerParams(
        "conv2d",
        {"kernel": w, "bias": _zeros(filters)},
        {"filters": filters, "kernel_size": (kh, kw), "padding": tuple(padding)},
    )


def conv2d(x: Tensor, p: LayerParams) -> Tensor:
    """(B, C, H, W) -> (B, F, H', W')."""
    w, b = p["kernel"], p["bias"]
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d expects (B, {w.shape[1]}, H, W), got {x.shape}")
    pads = _pads(p.hyper)
    out, cache = _conv_forward(x.data, w.data, b.data, pads)

    def rule(g):
        dx, dw, db = _conv_backward(g, w.data, cache, pads, x.requires_grad)
        return dx, dw, db

    return record(out, (x, w, b), rule, "conv2d")


def conv1d_params(in_channels, filters, k, rng, padding=(0, 0)) -> LayerParams:
    w = glorot_uniform((filters, in_channels, k), in_channels * k, filters * k, rng)
    return LayerParams(
        "conv1d",
        {"kernel": w, "bias": _zeros(filters)},
        {"filters": filters, "kernel_size": k, "padding": tuple(padding)},
    )


def conv1d(x: Tensor, p: LayerParams) -> Tensor:
    """(B, C, L) -> (B, F, L'); a conv2d over a height-1 view."""
    w, b = p["kernel"], p["bias"]
    if x.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv1d expects (B, {w.shape[1]}, L), got {x.shape}")
    pads = ((0, 0), tuple(p.hyper.get("padding", (0, 0))))
    B, C, L = x.shape
    w4 = w.data[:, :, None, :]
    out, cache = _conv_forward(x.data[:, :, None, :], w4, b.data, pads)

    def rule(g):
        dx, dw, db = _conv_backward(g[:, :, None, :], w4, cache, pads, x.requires_grad)
        return (None if dx is None else dx[:, :, 0, :]), dw[:, :, 0, :], db

    return record(out[:, :, 0, :], (x, w, b), rule, "conv1d")


def depthwise_conv2d_params(in_channels, multiplier, kernel, rng, padding=((0, 0), (0, 0))):
    kh, kw = kernel
    w = glorot_uniform((in_channels * multiplier, 1, kh, kw), kh * kw, multiplier * kh * kw, rng)
    return LayerParams(
        "depthwise_conv2d",
        {"kernel": w, "bias": _zeros(in_channels * multiplier)},
        {"multiplier": multiplier, "kernel_size": (kh, kw), "padding": tuple(padding)},
    )


def depthwise_conv2d(x: Tensor, p: LayerParams) -> Tensor:
    """(B, C, H, W) -> (B, C*m, H', W'); output channel c*m+j sees only input channel c.

    Implemented as a loop of single-channel conv2d calls, so it matches that
    oracle bit for bit.
    """
    w, b = p["kernel"], p["bias"]
    m = p.hyper["multiplier"]
    if x.ndim != 4 or w.shape[0] != x.shape[1] * m:
        raise ShapeMismatch(f"depthwise expects {w.shape[0] // m} channels, got {x.shape}")
    pads = _pads(p.hyper)
    outs, caches = [], []
    for c in range(x.shape[1]):
        sl = slice(c * m, (c + 1) * m)
        o, cache = _conv_forward(x.data[:, c : c + 1], w.data[sl], b.data[sl], pads)
        outs.append(o)
        caches.append(cache)

    def rule(g):
        dx = np.zeros_like(x.data) if x.requires_grad else None
        dw = np.empty_like(w.data)
        db = np.empty_like(b.data)
        for c, cache in enumerate(caches):
            sl = slice(c * m, (c + 1) * m)
            dxc, dw[sl], db[sl] = _conv_backward(g[:, sl], w.data[sl], cache, pads, dx is not None)
            if dx is not None:
                dx[:, c : c + 1] = dxc
        return dx, dw, db

    return record(np.concatenate(outs, axis=1), (x, w, b), rule, "depthwise_conv2d")


# ---------------------------------------------------------------------------
# dense


def dense_params(in_dim, units, rng) -> LayerParams:
    return LayerParams(
        "dense",
        {"kernel": glorot_uniform((in_dim, units), in_dim, units, rng), "bias": _zeros(units)},
        {"units": units},
    )


def dense(x: Tensor, p: LayerParams) -> Tensor:
    w = p["kernel"]
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"dense expects (B, {w.shape[0]}), got {x.shape}")
    return add(matmul(x, w), p["bias"])


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm_params(features: int) -> LayerParams:
    dtype = get_default_dtype()
    return LayerParams(
        "batchnorm",
        {"gamma": Tensor(np.ones(features), requires_grad=True), "beta": _zeros(features)},
        {"eps": BN_EPS, "momentum": BN_MOMENTUM},
        {"running_mean": np.zeros(features, dtype), "running_var": np.ones(features, dtype)},
    )


def batchnorm(x: Tensor, p: LayerParams, mode: str = "train") -> Tensor:
    """Per-feature normalization over the batch (and spatial axes for rank 4).

    Train mode uses biased batch statistics and folds them into the running
    averages with ``running = momentum * running + (1 - momentum) * batch``.
    """
    gamma, beta = p["gamma"], p["beta"]
    if x.ndim == 2:
        axes, view = (0,), (1, -1)
    elif x.ndim == 4:
        axes, view = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeMismatch(f"batchnorm expects rank 2 or 4, got {x.shape}")
    if x.shape[1] != gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm expects {gamma.shape[0]} features, got {x.shape}")
    eps = p.hyper.get("eps", BN_EPS)
    if mode == "train":
        if x.shape[0] < 2:
            raise BatchTooSmall("batchnorm in train mode needs batch size >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = p.hyper.get("momentum", BN_MOMENTUM)
        p.buffers["running_mean"] = (mom * p.buffers["running_mean"] + (1 - mom) * mean).astype(mean.dtype)
        p.buffers["running_var"] = (mom * p.buffers["running_var"] + (1 - mom) * var).astype(var.dtype)
    elif mode == "eval":
        mean, var = p.buffers["running_mean"], p.buffers["running_var"]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(view)) * invstd.reshape(view)
    out = gamma.data.reshape(view) * xhat + beta.data.reshape(view)
    n = x.size // x.shape[1]

    def rule(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(view)
            if mode == "train":
                s1 = dxhat.sum(axis=axes).reshape(view)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(view)
                dx = invstd.reshape(view) / n * (n * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * invstd.reshape(view)
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), rule, "batchnorm")


# ---------------------------------------------------------------------------
# pooling, dropout


def maxpool2d(x: Tensor, window=(2, 2), stride=None) -> Tensor:
    """Max over windows; gradient goes to the first (lowest flat index) maximum."""
    ph, pw = window
    sh, sw = stride or window
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects (B, C, H, W), got {x.shape}")
    if ph > x.shape[2] or pw > x.shape[3]:
        raise WindowLargerThanInput(f"window {window} larger than input {x.shape[2:]}")
    out, arg = _kernels.maxpool_forward(x.data, ph, pw, sh, sw)
    note_branch(arg)
    shape = x.shape
    return record(out, (x,), lambda g: (_kernels.maxpool_backward(g, arg, shape),), "maxpool2d")


def dropout(x: Tensor, p_drop: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p_drop) so eval is the identity."""
    if not 0 <= p_drop < 1:
        raise InvalidProbability(f"dropout probability {p_drop} not in [0, 1)")
    if mode == "eval" or p_drop == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a generator")
    keep = rng.random(x.shape) >= p_drop
    scale = (keep / (1 - p_drop)).astype(x.dtype)
    return record(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# ---------------------------------------------------------------------------
# GRU

GRU_WEIGHTS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def gru_params(input_dim: int, hidden: int, rng) -> LayerParams:
    weights = {}
    for gate in "zrh":
        weights[f"W_{gate}"] = glorot_uniform((input_dim, hidden), input_dim, hidden, rng)
        weights[f"U_{gate}"] = glorot_uniform((hidden, hidden), hidden, hidden, rng)
        weights[f"b_{gate}"] = _zeros(hidden)
    return LayerParams("gru", {k: weights[k] for k in GRU_WEIGHTS}, {"hidden": hidden})


def _sig(a):
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype, copy=False)


def gru_forward(x: Tensor, p: LayerParams) -> tuple[Tensor, Tensor]:
    """Run a GRU over (B, T, D) from a zero state; returns (outputs (B,T,H), final (B,H)).

    z = sig(x W_z + h U_z + b_z), r = sig(x W_r + h U_r + b_r),
    c = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * c.
    """
    if x.ndim != 3:
        raise ShapeMismatch(f"gru expects (B, T, D), got {x.shape}")
    B, T, D = x.shape
    if T < 1:
        raise EmptySequence("GRU needs at least one time step")
    w = [p[k] for k in GRU_WEIGHTS]
    Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh = (t.data for t in w)
    if Wz.shape[0] != D:
        raise ShapeMismatch(f"gru expects input dim {Wz.shape[0]}, got {D}")
    H = Uz.shape[0]
    xf = x.data.reshape(B * T, D)
    xz = (xf @ Wz + bz).reshape(B, T, H)
    xr = (xf @ Wr + br).reshape(B, T, H)
    xh = (xf @ Wh + bh).reshape(B, T, H)
    hs = np.zeros((B, T + 1, H), dtype=x.dtype)
    zs = np.empty((B, T, H), dtype=x.dtype)
    rs = np.empty_like(zs)
    cs = np.empty_like(zs)
    for t in range(T):
        h = hs[:, t]
        z = _sig(xz[:, t] + h @ Uz)
        r = _sig(xr[:, t] + h @ Ur)
        c = np.tanh(xh[:, t] + (r * h) @ Uh)
        hs[:, t + 1] = (1 - z) * h + z * c
        zs[:, t], rs[:, t], cs[:, t] = z, r, c

    def rule(g):
        daz = np.empty_like(zs)
        dar = np.empty_like(zs)
        dah = np.empty_like(zs)
        dUz, dUr, dUh = np.zeros_like(Uz), np.zeros_like(Ur), np.zeros_like(Uh)
        dh = np.zeros((B, H), dtype=g.dtype)
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            h, z, r, c = hs[:, t], zs[:, t], rs[:, t], cs[:, t]
            dc = dh * z
            dz = dh * (c - h)
            dprev = dh * (1 - z)
            ah = dc * (1 - c * c)
            drh = ah @ Uh.T
            dUh += (r * h).T @ ah
            ar = drh * h * r * (1 - r)
            dprev += drh * r
            az = dz * z * (1 - z)
            dUz += h.T @ az
            dUr += h.T @ ar
            dprev += az @ Uz.T + ar @ Ur.T
            daz[:, t], dar[:, t], dah[:, t] = az, ar, ah
            dh = dprev
        fz, fr, fh = (a.reshape(B * T, H) for a in (daz, dar, dah))
        dx = None
        if x.requires_grad:
            dx = (fz @ Wz.T + fr @ Wr.T + fh @ Wh.T).reshape(B, T, D)
        return (
            dx,
            xf.T @ fz, dUz, fz.sum(axis=0),
            xf.T @ fr, dUr, fr.sum(axis=0),
            xf.T @ fh, dUh, fh.sum(axis=0),
        )

    outputs = record(np.ascontiguousarray(hs[:, 1:]), (x, *w), rule, "gru")
    return outputs, outputs[:, T - 1]


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


__all__ = [
    "LayerParams",
    "batchnorm",
    "batchnorm_params",
    "conv1d",
    "conv1d_params",
    "conv2d",
    "conv2d_params",
    "dense",
    "dense_params",
    "depthwise_conv2d",
    "depthwise_conv2d_params",
    "dropout",
    "flatten",
    "glorot_uniform",
    "gru_forward",
    "gru_params",
    "maxpool2d",
    "relu",
    "resolve_padding",
]
