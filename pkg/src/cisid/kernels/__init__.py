"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

The backend is chosen once at import time.  Set ``CISID_DISABLE_EXT=1`` to
force the numpy lane (useful for testing and benchmarking), and
``CISID_KERNEL_THREADS=<n>`` to run the compiled kernels with n OpenMP
threads (default 1; results are bit-stable only at a fixed thread count).
"""

import os

from . import _numpy_backend

_ext = None
if not os.environ.get("CISID_DISABLE_EXT"):
    try:
        from . import _gmm_ext as _ext
    except ImportError:
        _ext = None

_impl = _ext if _ext is not None else _numpy_backend

BACKEND = _impl.NAME

try:
    KERNEL_THREADS = max(1, int(os.environ.get("CISID_KERNEL_THREADS", "1")))
except ValueError:
    KERNEL_THREADS = 1


def frame_loglik(x, log_w, means, inv_var, log_norm):
    """Per-frame weighted mixture log-likelihoods, shape (T,)."""
    if _impl is _numpy_backend:
        return _numpy_backend.frame_loglik(x, log_w, means, inv_var, log_norm)
    return _ext.frame_loglik(x, log_w, means, inv_var, log_norm,
                             num_threads=KERNEL_THREADS)


def accumulate_stats(x, log_w, means, inv_var, log_norm, want_s=False):
    """Fused E-step: (ll_sum, zeroth, raw first, raw second | None) stats."""
    if _impl is _numpy_backend:
        return _numpy_backend.accumulate_stats(x, log_w, means, inv_var,
                                               log_norm, want_s=want_s)
    return _ext.accumulate_stats(x, log_w, means, inv_var, log_norm,
                                 want_s=want_s, num_threads=KERNEL_THREADS)
