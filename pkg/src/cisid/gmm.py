"""Diagonal-covariance GMM machinery: EM-trained UBM, MAP mean adaptation,
log-likelihood scoring and closed-set identification.

The per-frame responsibility computations run on the compiled kernel when
available (see cisid.kernels); everything here is deterministic for fixed
seeds and a fixed kernel thread count.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DataError, NumericalError
from .frontend import FeatureSequence

log = logging.getLogger(__name__)

_MAGIC = b"CIGM"
_VERSION = 1


@dataclass
class GmmModel:
    """Diagonal GMM: K weights, K x D means and variances, shared floor."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    variance_floor: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.shape != self.variances.shape or self.means.ndim != 2:
            raise DataError("means and variances must both be (K, D)")
        if self.weights.shape != (self.means.shape[0],):
            raise DataError("weight vector length must equal K")
        if self.variance_floor <= 0:
            raise DataError("variance floor must be positive")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-10:
            raise DataError("weights must be nonnegative and sum to 1")
        if np.any(self.variances < self.variance_floor * (1 - 1e-12)):
            raise DataError("variances fall below the floor")
        for name, arr in (("weights", self.weights), ("means", self.means),
                          ("variances", self.variances)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite GMM {name}")

    @property
    def num_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(struct.pack("<IId", self.num_components, self.dim, self.variance_floor))
        for arr in (self.weights, self.means, self.variances):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def natural_params(self):
        """(log_w, means, inv_var, log_norm) as the kernels expect them."""
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        inv_var = 1.0 / self.variances
        log_norm = -0.5 * (self.dim * np.log(2.0 * np.pi)
                           + np.log(self.variances).sum(axis=1))
        return log_w, self.means, inv_var, log_norm


@dataclass
class SpeakerModelGmm:
    """MAP-adapted speaker model; weights/variances shared with the UBM."""

    model: GmmModel
    label: str
    ubm_fingerprint: str


def _as_matrix(features):
    if isinstance(features, FeatureSequence):
        return features.vectors
    return np.asarray(features, dtype=np.float64)


def default_variance_floor(features, fraction=1e-3):
    """Floor at `fraction` of the mean global per-dimension variance."""
    x = _as_matrix(features)
    return max(float(x.var(axis=0).mean()) * fraction, 1e-12)


def kmeans_init(features, k: int, seed, lloyd_iters: int = 20) -> GmmModel:
    """k-means++ seeding plus at most 20 Lloyd iterations.

    Weights are cluster proportions; variances are floored within-cluster
    diagonal variances.  Deterministic per seed.
    """
    x = _as_matrix(features)
    T, D = x.shape
    if T < k:
        raise DataError(f"{T} frames cannot seed {k} clusters")
    if not (1 <= lloyd_iters <= 20):
        raise DataError("lloyd_iters must lie in 1..20")
    rng = np.random.default_rng(seed)
    floor = default_variance_floor(x)

    centers = np.empty((k, D))
    centers[0] = x[rng.integers(T)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = x[rng.integers(T, size=k - j)]
            break
        centers[j] = x[rng.choice(T, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[j]) ** 2, axis=1))

    assign = None
    for _ in range(lloyd_iters):
        # squared distances via ||x||^2 - 2 x.c + ||c||^2 (chunked)
        new_assign = np.empty(T, dtype=np.int64)
        c_sq = np.sum(centers**2, axis=1)
        for lo in range(0, T, 1 << 15):
            xb = x[lo : lo + (1 << 15)]
            dist = c_sq - 2.0 * (xb @ centers.T)
            new_assign[lo : lo + (1 << 15)] = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                # revive an empty cluster at the point farthest from its center
                far = np.argmax(np.sum((x - centers[assign]) ** 2, axis=1))
                centers[j] = x[far]
                assign[far] = j

    counts = np.bincount(assign, minlength=k).astype(np.float64)
    weights = counts / T
    variances = np.full((k, D), floor)
    for j in range(k):
        members = x[assign == j]
        if members.shape[0] > 1:
            variances[j] = np.maximum(members.var(axis=0), floor)
    return GmmModel(weights=weights, means=centers, variances=variances,
                    variance_floor=floor)


def em_train(init: GmmModel, features, max_iters: int = 50,
             rel_tol: float = 1e-5):
    """EM for diagonal GMMs in the log domain.

    Returns ``(model, history)`` where history[i] is the average per-frame
    log-likelihood under the parameters entering iteration i (non-decreasing
    by the EM guarantee).  Stops after ``max_iters`` or when the relative
    gain drops below ``rel_tol``.  Variances are floored each M-step.
    """
    x = _as_matrix(features)
    T = x.shape[0]
    if T == 0:
        raise DataError("cannot train a GMM on empty features")
    K = init.num_components
    if T < 10 * K:
        log.warning("EM training with %d frames for %d components; "
                    "recommend at least %d", T, K, 10 * K)
    model = init
    history = []
    for iteration in range(max_iters):
        ll_sum, n, f, s = kernels.accumulate_stats(x, *model.natural_params(),
                                                   want_s=True)
        avg_ll = ll_sum / T
        if not np.isfinite(avg_ll):
            raise NumericalError(
                f"non-finite log-likelihood at EM iteration {iteration}")
        history.append(avg_ll)

        occupied = n > 1e-10
        weights = n / n.sum()
        means = model.means.copy()
        variances = model.variances.copy()
        means[occupied] = f[occupied] / n[occupied, None]
        variances[occupied] = np.maximum(
            s[occupied] / n[occupied, None] - means[occupied] ** 2,
            model.variance_floor)
        for name, arr in (("weights", weights), ("means", means),
                          ("variances", variances)):
            if not np.all(np.isfinite(arr)):
                raise NumericalError(
                    f"non-finite {name} at EM iteration {iteration}")
        model = GmmModel(weights=weights, means=means, variances=variances,
                         variance_floor=model.variance_floor)
        if len(history) >= 2:
            gain = history[-1] - history[-2]
            if gain < rel_tol * abs(history[-2]):
                break
    return model, history


def map_adapt(ubm: GmmModel, features, relevance: float = 16.0) -> SpeakerModelGmm:
    """MAP adaptation of the UBM means toward one speaker's data.

    alpha_k = n_k / (n_k + relevance); adapted mean is the alpha-weighted
    blend of the data's posterior mean and the UBM mean.  Weights and
    variances are copied from the UBM.  Components with no assigned frames
    are left untouched.
    """
    if relevance <= 0:
        raise DataError("relevance factor must be positive")
    x = _as_matrix(features)
    if x.shape[0] == 0:
        raise DataError("cannot adapt to empty features")
    if x.shape[1] != ubm.dim:
        raise DataError(f"feature dim {x.shape[1]} != UBM dim {ubm.dim}")
    _, n, f, _ = kernels.accumulate_stats(x, *ubm.natural_params())
    means = ubm.means.copy()
    occupied = n > 1e-10
    alpha = n[occupied] / (n[occupied] + relevance)
    e_k = f[occupied] / n[occupied, None]
    means[occupied] += alpha[:, None] * (e_k - ubm.means[occupied])
    adapted = GmmModel(weights=ubm.weights.copy(), means=means,
                       variances=ubm.variances.copy(),
                       variance_floor=ubm.variance_floor)
    return SpeakerModelGmm(model=adapted, label="", ubm_fingerprint=ubm.fingerprint())


def log_likelihood(model: GmmModel, seq) -> float:
    """Average per-frame log-likelihood of a sequence under the model."""
    x = _as_matrix(seq)
    if x.shape[0] == 0:
        raise DataError("cannot score an empty sequence")
    if x.shape[1] != model.dim:
        raise DataError(f"feature dim {x.shape[1]} != model dim {model.dim}")
    return float(np.mean(kernels.frame_loglik(x, *model.natural_params())))


def identify_gmm(models, seq):
    """Closed-set decision: argmax average log-likelihood.

    Ties break toward the earlier enrolled model.  Returns
    ``(label, scores)`` with one score per model in enrollment order.
    """
    models = list(models)
    if not models:
        raise DataError("no enrolled speaker models")
    dims = {(m.model.num_components, m.model.dim) for m in models}
    if len(dims) != 1:
        raise DataError("enrolled models disagree on K or D")
    scores = np.array([log_likelihood(m.model, seq) for m in models])
    return models[int(np.argmax(scores))].label, scores


def save_gmm(model: GmmModel, path):
    """Versioned little-endian binary: K, D, floor, weights, means, variances."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HIId", _VERSION, model.num_components,
                             model.dim, model.variance_floor))
        for arr in (model.weights, model.means, model.variances):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_gmm(path) -> GmmModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read GMM file {path}: {exc}") from exc
    if blob[:4] != _MAGIC:
        raise DataError(f"{path} is not a cisid GMM file")
    version, k, d, floor = struct.unpack_from("<HIId", blob, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported GMM file version {version}")
    offset = 4 + struct.calcsize("<HIId")
    need = k + 2 * k * d
    data = np.frombuffer(blob, dtype="<f8", offset=offset, count=need)
    weights = data[:k]
    means = data[k : k + k * d].reshape(k, d)
    variances = data[k + k * d :].reshape(k, d)
    return GmmModel(weights=weights.copy(), means=means.copy(),
                    variances=variances.copy(), variance_floor=floor)


def gmm_to_json(model: GmmModel) -> str:
    """JSON export for diffing; not a load format."""
    return json.dumps({
        "num_components": model.num_components,
        "dim": model.dim,
        "variance_floor": model.variance_floor,
        "weights": model.weights.tolist(),
        "means": model.means.tolist(),
        "variances": model.variances.tolist(),
    }, indent=2)
