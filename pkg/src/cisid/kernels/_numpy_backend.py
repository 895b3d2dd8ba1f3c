"""Pure-numpy implementation of the diagonal-GMM hot kernels.

Both backends share one contract, documented here once:

``x`` is a (T, D) frame matrix, and the model is passed pre-expanded as
``log_w`` (K,), ``means`` (K, D), ``inv_var`` (K, D) and ``log_norm`` (K,)
with ``log_norm[k] = -0.5 * (D*log(2*pi) + sum_d log var[k, d])``.  The
weighted log density of frame t under component k is then

    log w_k + log_norm_k - 0.5 * sum_d (x[t,d] - mu[k,d])**2 * inv_var[k,d]

Frames are processed in fixed-size blocks in float64, so results are
bit-stable from run to run for identical inputs.
"""

import numpy as np

NAME = "numpy"

# Frames per block; bounds the (block, K) scratch matrices.
_BLOCK = 1 << 15


def _weighted_logprob(xb, log_w, means, inv_var, log_norm):
    """(block, K) matrix of log(w_k * N(x; mu_k, var_k)) via two GEMMs."""
    quad = xb**2 @ (-0.5 * inv_var).T + xb @ (means * inv_var).T
    offset = log_w + log_norm - 0.5 * np.einsum("kd,kd->k", means**2, inv_var)
    return quad + offset


def _logsumexp_rows(lp):
    hi = np.max(lp, axis=1)
    # all-(-inf) rows cannot occur: mixture weights sum to one
    out = hi + np.log(np.sum(np.exp(lp - hi[:, None]), axis=1))
    return out


def frame_loglik(x, log_w, means, inv_var, log_norm):
    """Per-frame mixture log-likelihoods, shape (T,)."""
    x = np.ascontiguousarray(x)
    T = x.shape[0]
    out = np.empty(T, dtype=np.float64)
    for lo in range(0, T, _BLOCK):
        xb = np.asarray(x[lo : lo + _BLOCK], dtype=np.float64)
        out[lo : lo + _BLOCK] = _logsumexp_rows(
            _weighted_logprob(xb, log_w, means, inv_var, log_norm)
        )
    return out


def accumulate_stats(x, log_w, means, inv_var, log_norm, want_s=False):
    """Fused E-step accumulation.

    Returns ``(ll_sum, n, f, s)`` where ``ll_sum`` is the summed frame
    log-likelihood, ``n[k] = sum_t gamma[t,k]``, ``f[k] = sum_t gamma[t,k]*x[t]``
    (raw, uncentered) and ``s[k] = sum_t gamma[t,k]*x[t]**2`` (or None when
    ``want_s`` is false).
    """
    x = np.ascontiguousarray(x)
    T, D = x.shape
    K = log_w.shape[0]
    n = np.zeros(K, dtype=np.float64)
    f = np.zeros((K, D), dtype=np.float64)
    s = np.zeros((K, D), dtype=np.float64) if want_s else None
    ll_sum = 0.0
    for lo in range(0, T, _BLOCK):
        xb = np.asarray(x[lo : lo + _BLOCK], dtype=np.float64)
        lp = _weighted_logprob(xb, log_w, means, inv_var, log_norm)
        ll = _logsumexp_rows(lp)
        ll_sum += float(np.sum(ll))
        gamma = np.exp(lp - ll[:, None])
        n += gamma.sum(axis=0)
        f += gamma.T @ xb
        if want_s:
            s += gamma.T @ xb**2
    return ll_sum, n, f, s
