"""Classifier-ready feature sequences from electrodograms (CI path) or
waveforms (normal-hearing MFCC baseline), plus CMVN and delta appending."""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from .ace import Electrodogram
from .audio import AudioBuffer
from .errors import DataError

SOURCE_CI = "ci-electrodogram"
SOURCE_MFCC = "nh-mfcc"

_MAGIC = b"CIFS"
_VERSION = 1


@dataclass
class FeatureSequence:
    """Time-ordered D-dimensional real feature vectors."""

    vectors: np.ndarray  # (T, D) float64
    source: str
    frame_period: float  # seconds between frames

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DataError("feature vectors must form a (T, D) matrix")
        if self.vectors.size and not np.all(np.isfinite(self.vectors)):
            raise DataError("feature sequence contains non-finite values")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def save(self, path):
        """Binary container: magic, version, dim, frame count, frame
        period, source tag, then little-endian float32 data row-major."""
        src = self.source.encode("utf-8")[:16].ljust(16, b"\0")
        header = _MAGIC + struct.pack("<HII d", _VERSION, self.dim, len(self), self.frame_period)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(src)
            fh.write(self.vectors.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read feature file {path}: {exc}") from exc
        if blob[:4] != _MAGIC:
            raise DataError(f"{path} is not a cisid feature file")
        version, dim, frames, period = struct.unpack_from("<HII d", blob, 4)
        if version != _VERSION:
            raise DataError(f"{path}: unsupported feature file version {version}")
        offset = 4 + struct.calcsize("<HII d")
        source = blob[offset : offset + 16].rstrip(b"\0").decode("utf-8")
        data = np.frombuffer(blob, dtype="<f4", offset=offset + 16,
                             count=frames * dim).reshape(frames, dim)
        return cls(vectors=data.astype(np.float64), source=source, frame_period=period)

    def to_csv(self, path):
        np.savetxt(path, self.vectors, delimiter=",")


@dataclass
class MfccConfig:
    num_mel_filters: int = 40
    num_ceps: int = 19
    frame_len: int = 400
    hop: int = 160
    sample_rate: int = 16000
    include_c0: bool = False
    fft_size: int = 512
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.num_ceps + (0 if self.include_c0 else 1) > self.num_mel_filters:
            raise DataError("cannot retain more cepstra than mel filters")
        if not (0 < self.hop < self.frame_len):
            raise DataError("need frame_len > hop > 0")
        if self.fft_size < self.frame_len:
            raise DataError("fft_size must cover the frame")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_filters, fft_size, rate, f_lo=0.0, f_hi=None):
    """Triangular mel filterbank, (num_filters, fft_size//2 + 1).

    Triangles are evaluated on the mel axis with uniformly spaced centers,
    so weights at any bin between the first and last center sum to one
    exactly (partition of unity).
    """
    if f_hi is None:
        f_hi = rate / 2.0
    edges = np.linspace(hz_to_mel(f_lo), hz_to_mel(f_hi), num_filters + 2)
    bin_mels = hz_to_mel(np.arange(fft_size // 2 + 1) * rate / fft_size)
    fb = np.zeros((num_filters, bin_mels.shape[0]))
    for m in range(num_filters):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_mels - left) / (center - left)
        down = (right - bin_mels) / (right - center)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def electrodogram_features(eg: Electrodogram, normalize: bool = True,
                           deltas: bool = True, delta_window: int = 2) -> FeatureSequence:
    """Electrodogram frames as feature vectors.

    All-zero frames (no stimulation) are dropped before anything else;
    levels are scaled to [0, 1] when ``normalize``; deltas double the
    dimension when requested.
    """
    if eg.num_frames == 0:
        raise DataError("electrodogram has no frames")
    active = eg.frames[np.any(eg.frames != 0, axis=1)]
    if active.shape[0] == 0:
        raise DataError("electrodogram is entirely silent; no features")
    base = active.astype(np.float64)
    if normalize:
        base = base / 255.0
    seq = FeatureSequence(vectors=base, source=SOURCE_CI, frame_period=eg.hop_seconds)
    if deltas:
        seq = append_deltas(seq, delta_window)
    return seq


def mfcc(buf: AudioBuffer, cfg: MfccConfig) -> FeatureSequence:
    """Mel-frequency cepstra: Hamming window, power spectrum, triangular
    mel filters, floored log energies, orthonormal DCT-II."""
    if buf.rate != cfg.sample_rate:
        raise DataError(
            f"buffer rate {buf.rate} != MFCC rate {cfg.sample_rate}; resample first")
    if len(buf) < cfg.frame_len:
        raise DataError("buffer shorter than one MFCC frame")
    n_frames = (len(buf) - cfg.frame_len) // cfg.hop + 1
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = buf.samples[idx] * np.hamming(cfg.frame_len)
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    fb = mel_filterbank(cfg.num_mel_filters, cfg.fft_size, cfg.sample_rate)
    energies = np.log(np.maximum(power @ fb.T, cfg.log_floor))
    ceps = dct(energies, type=2, norm="ortho", axis=1)
    lo = 0 if cfg.include_c0 else 1
    return FeatureSequence(vectors=ceps[:, lo : lo + cfg.num_ceps],
                           source=SOURCE_MFCC, frame_period=cfg.hop / cfg.sample_rate)


def cmvn(seq: FeatureSequence) -> FeatureSequence:
    """Per-dimension zero mean / unit variance over the sequence.

    Dimensions with (numerically) zero variance are centered only.
    """
    if len(seq) < 2:
        raise DataError("CMVN needs at least 2 frames")
    mean = seq.vectors.mean(axis=0)
    centered = seq.vectors - mean
    std = centered.std(axis=0)
    live = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    out = np.where(live, centered / np.where(live, std, 1.0), centered)
    return FeatureSequence(vectors=out, source=seq.source, frame_period=seq.frame_period)


def append_deltas(seq: FeatureSequence, window: int = 2) -> FeatureSequence:
    """Append regression deltas over +-window frames; doubles the dimension.

    Edge frames use replicated padding, so deltas there are attenuated.
    """
    if window < 1:
        raise DataError("delta window must be >= 1")
    if len(seq) <= 2 * window:
        raise DataError(f"sequence too short for delta window {window}")
    x = np.pad(seq.vectors, ((window, window), (0, 0)), mode="edge")
    denom = 2.0 * sum(tau * tau for tau in range(1, window + 1))
    delta = np.zeros_like(seq.vectors)
    T = len(seq)
    for tau in range(1, window + 1):
        delta += tau * (x[window + tau : window + tau + T] -
                        x[window - tau : window - tau + T])
    delta /= denom
    return FeatureSequence(vectors=np.hstack([seq.vectors, delta]),
                           source=seq.source, frame_period=seq.frame_period)
