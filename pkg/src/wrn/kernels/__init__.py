"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is fixed at import time from ``WRN_NUMBA``: ``0`` forces the
numpy path, anything else (the default) uses numba when it is importable.
Both backends stay importable as ``kernels.numpy_backend`` and
``kernels.numba_backend`` so they can be compared side by side.
"""
import os

from . import _numpy as numpy_backend

try:
    from . import _numba as numba_backend
except ImportError:  # pragma: no cover - numba is optional
    numba_backend = None

_want_numba = os.environ.get("WRN_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

if _want_numba and numba_backend is not None:
    BACKEND = "numba"
    _impl = numba_backend
else:
    BACKEND = "numpy"
    _impl = numpy_backend

im2col = _impl.im2col
col2im = _impl.col2im
bn_forward_train = _impl.bn_forward_train
bn_backward = _impl.bn_backward
crop_flip = _impl.crop_flip


def backends():
    """Mapping of available backend name -> kernel module."""
    out = {"numpy": numpy_backend}
    if numba_backend is not None:
        out["numba"] = numba_backend
    return out


def set_threads(n: int) -> None:
    """Cap BLAS and numba thread pools at ``n``."""
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)
    if numba_backend is not None:
        import warnings

        import numba

        with warnings.catch_warnings():
            # numba probes optional threading layers (TBB) here and warns if they are too old
            warnings.simplefilter("ignore", numba.NumbaWarning)
            numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


__all__ = [
    "BACKEND", "im2col", "col2im", "bn_forward_train", "bn_backward", "crop_flip",
    "backends", "set_threads", "numpy_backend", "numba_backend",
]
