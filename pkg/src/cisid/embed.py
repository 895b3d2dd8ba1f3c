"""i-vector / PLDA back end: Baum-Welch statistics, total-variability
training and extraction, length normalization, PLDA training and scoring.

Conventions
-----------
The total-variability model writes a GMM mean-supervector offset as T @ w
with w ~ N(0, I_R); given an utterance's occupancies n and centered first
moments f it holds, per component k with variances sigma2_k,

    L = I + sum_k n_k * T_k' diag(1/sigma2_k) T_k
    w = L^-1 * T' (f / sigma2)                      (posterior mean)

PLDA models a length-normalized i-vector as x = mu + V h + eps with
h ~ N(0, I_q) shared within a speaker and eps ~ N(0, Sigma_w).  Scoring the
same/different-speaker hypotheses uses the two 2R-dimensional joint
Gaussians in closed form.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from . import kernels
from .errors import DataError, NumericalError
from .gmm import GmmModel, _as_matrix

log = logging.getLogger(__name__)

_TV_MAGIC = b"CITV"
_PLDA_MAGIC = b"CIPL"
_VERSION = 1


@dataclass
class BaumWelchStats:
    """Zeroth-order occupancies and UBM-mean-centered first-order sums."""

    n: np.ndarray  # (K,)
    f: np.ndarray  # (K, D), sum_t gamma_tk * (x_t - mu_k)
    ubm_fingerprint: str

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.float64)
        self.f = np.asarray(self.f, dtype=np.float64)
        if self.f.ndim != 2 or self.n.shape != (self.f.shape[0],):
            raise DataError("stats shapes must be n=(K,), f=(K, D)")
        if np.any(self.n < -1e-9):
            raise DataError("occupancies must be nonnegative")
        if not (np.all(np.isfinite(self.n)) and np.all(np.isfinite(self.f))):
            raise DataError("non-finite Baum-Welch statistics")

    @property
    def total_frames(self):
        return float(self.n.sum())


def bw_stats(ubm: GmmModel, seq) -> BaumWelchStats:
    """Accumulate zeroth/first-order statistics of a sequence under the UBM."""
    x = _as_matrix(seq)
    if x.shape[0] == 0:
        raise DataError("cannot accumulate statistics of an empty sequence")
    if x.shape[1] != ubm.dim:
        raise DataError(f"feature dim {x.shape[1]} != UBM dim {ubm.dim}")
    _, n, f_raw, _ = kernels.accumulate_stats(x, *ubm.natural_params())
    return BaumWelchStats(n=n, f=f_raw - n[:, None] * ubm.means,
                          ubm_fingerprint=ubm.fingerprint())


@dataclass
class TvModel:
    """Total-variability model tied to its parent UBM.

    t_matrix is (K*D, R) row-major in component-major order; sigma carries
    the UBM variances needed by the extraction formula.
    """

    t_matrix: np.ndarray
    rank: int
    num_components: int
    dim: int
    sigma: np.ndarray  # (K, D) UBM variances
    ubm_fingerprint: str
    _gram: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.t_matrix = np.asarray(self.t_matrix, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        kd = self.num_components * self.dim
        if self.t_matrix.shape != (kd, self.rank):
            raise DataError("t_matrix must be (K*D, R)")
        # R == K*D is allowed for the degenerate scalar case used in tests
        if self.rank > kd:
            raise DataError("rank must not exceed K*D")
        if self.sigma.shape != (self.num_components, self.dim):
            raise DataError("sigma must be (K, D)")
        if not np.all(np.isfinite(self.t_matrix)):
            raise DataError("non-finite total-variability matrix")

    def component_grams(self):
        """Cached per-component T_k' diag(1/sigma2_k) T_k, shape (K, R, R)."""
        if self._gram is None:
            t3 = self.t_matrix.reshape(self.num_components, self.dim, self.rank)
            weighted = t3 / self.sigma[:, :, None]
            self._gram = np.einsum("kdr,kds->krs", t3, weighted)
        return self._gram


def _posterior(tv: TvModel, stats: BaumWelchStats):
    """Cholesky of the posterior precision L and the projected stats b."""
    prec_f = (stats.f / tv.sigma).reshape(-1)
    b = tv.t_matrix.T @ prec_f
    L = np.eye(tv.rank) + np.einsum("k,krs->rs", stats.n, tv.component_grams())
    try:
        cho = linalg.cho_factor(L, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"posterior precision not SPD: {exc}") from exc
    return cho, b


def train_tv(ubm: GmmModel, stats_list, rank: int, iters: int = 10, seed=0):
    """EM for the total-variability matrix.

    E-step computes each utterance's latent posterior mean/covariance;
    M-step solves per-row least squares for T.  Initialization is random
    Gaussian scaled by the UBM standard deviations, deterministic per seed.

    Returns ``(model, history)`` where history[i] is the summed marginal
    log-likelihood of the statistics under the parameters entering
    iteration i (non-decreasing by the EM guarantee).
    """
    stats_list = list(stats_list)
    if not stats_list:
        raise DataError("cannot train a TV model without statistics")
    if iters < 1:
        raise DataError("need at least one EM iteration")
    K, D = ubm.means.shape
    kd = K * D
    if rank > kd:
        raise DataError(f"rank {rank} must not exceed K*D = {kd}")
    if len(stats_list) < rank:
        log.warning("training a rank-%d TV model on %d utterances; "
                    "recommend at least %d", rank, len(stats_list), rank)
    fp = ubm.fingerprint()
    for st in stats_list:
        if st.ubm_fingerprint != fp:
            raise DataError("statistics come from a different UBM")

    rng = np.random.default_rng(seed)
    sigma = ubm.variances
    t = rng.standard_normal((kd, rank)) * np.sqrt(sigma).reshape(-1)[:, None]
    model = TvModel(t_matrix=t, rank=rank, num_components=K, dim=D,
                    sigma=sigma, ubm_fingerprint=fp)

    # constant part of the marginal log-likelihood (independent of T)
    const_terms = []
    for st in stats_list:
        mask = st.n > 1e-12
        n_blk = np.repeat(st.n[mask], D)
        f_blk = st.f[mask].reshape(-1)
        s_blk = sigma[mask].reshape(-1)
        const_terms.append(-0.5 * (np.sum(f_blk**2 / (n_blk * s_blk))
                                   + np.sum(np.log(2.0 * np.pi * n_blk * s_blk))))

    history = []
    eye = np.eye(rank)
    for _ in range(iters):
        a = np.zeros((K, rank, rank))
        c = np.zeros((kd, rank))
        ll_terms = []
        for st, const in zip(stats_list, const_terms):
            cho, b = _posterior(model, st)
            w = linalg.cho_solve(cho, b)
            cov = linalg.cho_solve(cho, eye)
            e_wwt = cov + np.outer(w, w)
            a += st.n[:, None, None] * e_wwt
            c += np.outer(st.f.reshape(-1), w)
            logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
            ll_terms.append(const - 0.5 * (logdet - b @ w))
        history.append(math.fsum(ll_terms))

        t_new = model.t_matrix.copy()
        t3 = t_new.reshape(K, D, rank)
        for k in range(K):
            if np.trace(a[k]) <= 1e-12:
                continue  # component never occupied; keep its rows
            t3[k] = linalg.solve(a[k], c[k * D : (k + 1) * D].T,
                                 assume_a="pos").T
        if not np.all(np.isfinite(t_new)):
            raise NumericalError("non-finite TV matrix during M-step")
        model = TvModel(t_matrix=t_new, rank=rank, num_components=K, dim=D,
                        sigma=sigma, ubm_fingerprint=fp)
    return model, history


def extract_ivector(tv: TvModel, stats: BaumWelchStats) -> np.ndarray:
    """Posterior mean of the total-variability factor for one utterance."""
    if stats.ubm_fingerprint != tv.ubm_fingerprint:
        raise DataError("statistics come from a different UBM than the TV model")
    cho, b = _posterior(tv, stats)
    w = linalg.cho_solve(cho, b)
    if not np.all(np.isfinite(w)):
        raise NumericalError("i-vector extraction produced non-finite values")
    return w


def length_normalize(v: np.ndarray) -> np.ndarray:
    """Project onto the unit sphere; rejects the zero vector."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise DataError("cannot length-normalize the zero vector")
    return v / norm


@dataclass
class PldaModel:
    """Simplified PLDA: speaker subspace V plus full within-class covariance."""

    mean: np.ndarray  # (R,)
    v: np.ndarray  # (R, q)
    sigma_w: np.ndarray  # (R, R), symmetric positive definite
    _score_cache: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.sigma_w = np.asarray(self.sigma_w, dtype=np.float64)
        r = self.mean.shape[0]
        if self.v.ndim != 2 or self.v.shape[0] != r:
            raise DataError("speaker subspace must be (R, q)")
        if self.v.shape[1] > r:
            raise DataError("subspace dimension q must not exceed R")
        if self.sigma_w.shape != (r, r):
            raise DataError("within-class covariance must be (R, R)")
        if not np.allclose(self.sigma_w, self.sigma_w.T, atol=1e-8):
            raise DataError("within-class covariance must be symmetric")

    @property
    def rank(self):
        return self.mean.shape[0]

    @property
    def subspace_dim(self):
        return self.v.shape[1]

    def _scoring(self):
        """Precompute the same/different-hypothesis 2R-dim Gaussian pieces."""
        if self._score_cache is None:
            r = self.rank
            sigma_b = self.v @ self.v.T
            sigma_t = sigma_b + self.sigma_w
            same = np.block([[sigma_t, sigma_b], [sigma_b, sigma_t]])
            diff = np.block([[sigma_t, np.zeros((r, r))],
                             [np.zeros((r, r)), sigma_t]])
            inv_diff = _spd_inverse(diff)
            inv_same = _spd_inverse(same)
            delta_inv = inv_same[0] - inv_diff[0]
            const = -0.5 * (inv_same[1] - inv_diff[1])
            self._score_cache = (delta_inv, const)
        return self._score_cache


def _spd_inverse(m):
    """(inverse, logdet) of a symmetric positive definite matrix."""
    try:
        cho = linalg.cho_factor(m, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"covariance not positive definite: {exc}") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
    return linalg.cho_solve(cho, np.eye(m.shape[0])), logdet


def train_plda(ivectors, labels, subspace_dim: int, iters: int = 10, seed=0):
    """EM for the PLDA model on labeled i-vectors.

    The global mean is fixed to the data mean; V and Sigma_w are updated
    iteratively from the per-speaker latent posteriors.  Deterministic per
    seed.  Returns ``(model, history)`` with history[i] the total marginal
    log-likelihood under the parameters entering iteration i.
    """
    x = np.asarray(ivectors, dtype=np.float64)
    labels = list(labels)
    if x.ndim != 2 or x.shape[0] != len(labels):
        raise DataError("need one label per i-vector row")
    speakers = sorted(set(labels))
    if len(speakers) < 2:
        raise DataError("PLDA needs at least 2 speakers")
    if not any(labels.count(s) >= 2 for s in speakers):
        raise DataError("PLDA needs at least one speaker with >= 2 utterances")
    n_total, r = x.shape
    q = subspace_dim
    if not (1 <= q <= r):
        raise DataError(f"subspace dimension {q} out of range 1..{r}")
    if iters < 1:
        raise DataError("need at least one EM iteration")

    mean = x.mean(axis=0)
    centered = x - mean
    scatter = centered.T @ centered
    counts = np.array([labels.count(s) for s in speakers], dtype=np.float64)
    sums = np.stack([centered[[l == s for l in labels]].sum(axis=0)
                     for s in speakers])

    rng = np.random.default_rng(seed)
    total_var = np.trace(scatter) / n_total
    v = rng.standard_normal((r, q)) * np.sqrt(total_var / (r * q))
    sigma_w = scatter / n_total + 1e-6 * total_var * np.eye(r)

    history = []
    eye_q = np.eye(q)
    for _ in range(iters):
        inv_w, logdet_w = _spd_inverse(sigma_w)
        wv = inv_w @ v
        phi = v.T @ wv
        c_vh = np.zeros((r, q))
        a_h = np.zeros((q, q))
        ll = -0.5 * (n_total * r * math.log(2.0 * math.pi)
                     + n_total * logdet_w
                     + np.sum(inv_w * scatter))
        for i in range(len(speakers)):
            p = eye_q + counts[i] * phi
            cho_p = linalg.cho_factor(p, lower=True)
            g = wv.T @ sums[i]
            h = linalg.cho_solve(cho_p, g)
            p_inv = linalg.cho_solve(cho_p, eye_q)
            e_hh = p_inv + np.outer(h, h)
            c_vh += np.outer(sums[i], h)
            a_h += counts[i] * e_hh
            ll += -0.5 * (2.0 * np.sum(np.log(np.diag(cho_p[0])))) + 0.5 * (g @ h)
        history.append(ll)

        v = linalg.solve(a_h, c_vh.T, assume_a="pos").T
        sigma_w = (scatter - v @ c_vh.T) / n_total
        sigma_w = 0.5 * (sigma_w + sigma_w.T)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(sigma_w))):
            raise NumericalError("non-finite PLDA parameters during M-step")
        sigma_w = _ensure_spd(sigma_w)
    return PldaModel(mean=mean, v=v, sigma_w=sigma_w), history


def _ensure_spd(sigma):
    """Return sigma, adding escalating diagonal jitter only if its Cholesky
    fails (small-sample degeneracy); raise if even heavy jitter cannot fix it."""
    scale = float(np.mean(np.diag(sigma)))
    if scale <= 0 or not np.isfinite(scale):
        raise NumericalError("residual covariance has nonpositive trace")
    jitter = 0.0
    for _ in range(7):
        try:
            linalg.cho_factor(sigma + jitter * np.eye(sigma.shape[0]), lower=True)
            if jitter:
                log.warning("PLDA residual covariance needed %.1e jitter", jitter)
                return sigma + jitter * np.eye(sigma.shape[0])
            return sigma
        except linalg.LinAlgError:
            jitter = 1e-8 * scale if jitter == 0.0 else jitter * 10.0
    raise NumericalError("residual covariance not positive definite")


def plda_score(model: PldaModel, enroll, test) -> float:
    """Same-speaker vs different-speaker log-likelihood ratio."""
    enroll = np.asarray(enroll, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if enroll.shape != (model.rank,) or test.shape != (model.rank,):
        raise DataError("i-vector dimension does not match the PLDA model")
    delta_inv, const = model._scoring()
    z = np.concatenate([enroll - model.mean, test - model.mean])
    return float(const - 0.5 * (z @ delta_inv @ z))


def average_enrollment(ivectors) -> np.ndarray:
    """Speaker enrollment vector: mean i-vector, re-length-normalized."""
    stack = np.asarray(list(ivectors), dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] == 0:
        raise DataError("enrollment needs at least one i-vector")
    return length_normalize(stack.mean(axis=0))


def identify_plda(model: PldaModel, enrolled, test):
    """Closed-set decision: argmax PLDA LLR over enrolled speakers.

    ``enrolled`` is an ordered list of (label, enrollment i-vector); ties
    break toward the earlier entry.  Returns (label, scores).
    """
    enrolled = list(enrolled)
    if not enrolled:
        raise DataError("no enrolled speakers")
    scores = np.array([plda_score(model, vec, test) for _, vec in enrolled])
    return enrolled[int(np.argmax(scores))][0], scores


def save_tv(model: TvModel, path):
    """Versioned little-endian binary: K, D, R, UBM fingerprint, sigma, T."""
    fp = model.ubm_fingerprint.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(_TV_MAGIC)
        fh.write(struct.pack("<HIIIH", _VERSION, model.num_components,
                             model.dim, model.rank, len(fp)))
        fh.write(fp)
        fh.write(np.ascontiguousarray(model.sigma, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.t_matrix, dtype="<f8").tobytes())


def load_tv(path) -> TvModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read TV file {path}: {exc}") from exc
    if blob[:4] != _TV_MAGIC:
        raise DataError(f"{path} is not a cisid TV file")
    version, k, d, rank, fp_len = struct.unpack_from("<HIIIH", blob, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported TV file version {version}")
    offset = 4 + struct.calcsize("<HIIIH")
    fp = blob[offset : offset + fp_len].decode("ascii")
    offset += fp_len
    sigma = np.frombuffer(blob, dtype="<f8", offset=offset, count=k * d)
    offset += 8 * k * d
    t = np.frombuffer(blob, dtype="<f8", offset=offset, count=k * d * rank)
    return TvModel(t_matrix=t.reshape(k * d, rank).copy(), rank=rank,
                   num_components=k, dim=d, sigma=sigma.reshape(k, d).copy(),
                   ubm_fingerprint=fp)


def save_plda(model: PldaModel, path):
    """Versioned little-endian binary: R, q, mean, V, Sigma_w."""
    with open(path, "wb") as fh:
        fh.write(_PLDA_MAGIC)
        fh.write(struct.pack("<HII", _VERSION, model.rank, model.subspace_dim))
        for arr in (model.mean, model.v, model.sigma_w):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_plda(path) -> PldaModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read PLDA file {path}: {exc}") from exc
    if blob[:4] != _PLDA_MAGIC:
        raise DataError(f"{path} is not a cisid PLDA file")
    version, r, q = struct.unpack_from("<HII", blob, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported PLDA file version {version}")
    offset = 4 + struct.calcsize("<HII")
    mean = np.frombuffer(blob, dtype="<f8", offset=offset, count=r)
    offset += 8 * r
    v = np.frombuffer(blob, dtype="<f8", offset=offset, count=r * q)
    offset += 8 * r * q
    sigma_w = np.frombuffer(blob, dtype="<f8", offset=offset, count=r * r)
    return PldaModel(mean=mean.copy(), v=v.reshape(r, q).copy(),
                     sigma_w=sigma_w.reshape(r, r).copy())


def tv_to_json(model: TvModel) -> str:
    return json.dumps({
        "num_components": model.num_components,
        "dim": model.dim,
        "rank": model.rank,
        "ubm_fingerprint": model.ubm_fingerprint,
        "t_matrix": model.t_matrix.tolist(),
        "sigma": model.sigma.tolist(),
    }, indent=2)


def plda_to_json(model: PldaModel) -> str:
    return json.dumps({
        "rank": model.rank,
        "subspace_dim": model.subspace_dim,
        "mean": model.mean.tolist(),
        "v": model.v.tolist(),
        "sigma_w": model.sigma_w.tolist(),
    }, indent=2)
