"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is chosen at import when it was built; setting the
environment variable ``UEEG_PURE_PYTHON=1`` forces the fallback. ``BACKEND``
names the active choice and both implementations stay importable for
benchmarks and cross-checks.
"""
import os

import numpy as np

from . import _fallback as fallback

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and os.environ.get("UEEG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    _impl = compiled
    BACKEND = "cython"
else:
    _impl = fallback
    BACKEND = "numpy"


def im2col(xp, kh, kw):
    return _impl.im2col(np.ascontiguousarray(xp), kh, kw)


def col2im(cols, shape, kh, kw):
    return _impl.col2im(np.ascontiguousarray(cols), tuple(shape), kh, kw)


def maxpool_forward(x, ph, pw, sh, sw):
    return _impl.maxpool_forward(np.ascontiguousarray(x), ph, pw, sh, sw)


def maxpool_backward(g, argidx, shape):
    return _impl.maxpool_backward(np.ascontiguousarray(g), np.ascontiguousarray(argidx), tuple(shape))
