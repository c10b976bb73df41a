"""Hot-loop kernels with a compiled backend and a NumPy fallback.

The compiled Cython module is used when it was built and imports cleanly.
Set ``HALLUAUDIO_PURE_PYTHON=1`` to force the NumPy backend.
"""
import os

import numpy as np

from . import _numpy

_compiled = None
if os.environ.get("HALLUAUDIO_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _cy as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _numpy


def _c(x):
    return np.ascontiguousarray(x)


def im2col3x3(x):
    return _impl.im2col3x3(_c(x))


def col2im3x3(cols, H, W):
    return _impl.col2im3x3(_c(cols), H, W)


def maxpool4_forward(x):
    return _impl.maxpool4_forward(_c(x))


def maxpool4_backward(dout, idx, H, W):
    return _impl.maxpool4_backward(_c(dout), _c(idx), H, W)


def bn_stats(x3):
    """Per-channel (mean, biased var) of a (B, C, N) array, as float64."""
    return _impl.bn_stats(_c(x3))


def bn_normalize(x3, mean, inv, gamma, beta):
    return _impl.bn_normalize(_c(x3), _c(mean), _c(inv), _c(gamma), _c(beta))


def bn_backward(dout3, xhat3, gamma, inv):
    """(dx, dgamma, dbeta) for training-mode batch norm on (B, C, N) arrays."""
    return _impl.bn_backward(_c(dout3), _c(xhat3), _c(gamma), _c(inv))


def relu_forward(x):
    return _impl.relu_forward(_c(x).reshape(-1)).reshape(x.shape)


def relu_backward(dout, y):
    return _impl.relu_backward(_c(dout).reshape(-1), _c(y).reshape(-1)).reshape(dout.shape)


__all__ = ["BACKEND", "im2col3x3", "col2im3x3", "maxpool4_forward", "maxpool4_backward",
           "bn_stats", "bn_normalize", "bn_backward", "relu_forward", "relu_backward"]
