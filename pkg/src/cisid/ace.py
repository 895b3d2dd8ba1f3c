"""N-of-M cochlear-implant encoding: pre-emphasis, framed FFT analysis,
22-band envelopes, maxima selection and loudness-growth mapping.

The output is an electrodogram: a time x electrode matrix of clinical
current units, with at most ``maxima`` electrodes stimulated per frame.
Channel index 0 is the lowest-frequency band and maps to electrode 22 (the
most apical contact); channel i maps to electrode ``num_channels - i``.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioBuffer
from .errors import DataError

NUM_ELECTRODES = 22

# Default 22-channel FFT bin allocation for a 128-point FFT at 16 kHz
# (125 Hz bins): bins 2..63, i.e. a 188-7938 Hz passband, one bin per
# channel up to ~1.2 kHz and growing groups toward 8 kHz.
_DEFAULT_BIN_WIDTHS = (1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 4, 4, 5, 5, 6, 7, 8)
_DEFAULT_FIRST_BIN = 2


@dataclass
class AllocationTable:
    """Per-channel contiguous FFT-bin ranges, ordered low to high frequency.

    bin_ranges holds half-open [lo, hi) bin index pairs into an rfft of
    ``fft_size`` points at ``rate`` Hz.
    """

    bin_ranges: list
    fft_size: int
    rate: int

    def __post_init__(self):
        prev_hi = None
        n_bins = self.fft_size // 2 + 1
        for lo, hi in self.bin_ranges:
            if hi <= lo:
                raise DataError(f"empty bin range [{lo}, {hi})")
            if prev_hi is not None and lo != prev_hi:
                raise DataError("bin ranges must be contiguous and ascending")
            if lo < 0 or hi > n_bins:
                raise DataError(f"bin range [{lo}, {hi}) outside the rfft grid")
            prev_hi = hi
        if not (1 <= len(self.bin_ranges) <= NUM_ELECTRODES):
            raise DataError("allocation table must define 1..22 channels")

    @property
    def num_channels(self):
        return len(self.bin_ranges)

    def electrode_for_channel(self, channel):
        """Electrode number (1..22); electrode 22 is most apical/lowest."""
        return self.num_channels - channel

    def center_frequencies(self):
        """Per-channel center frequency in Hz (midpoint of the bin range)."""
        bin_hz = self.rate / self.fft_size
        return np.array([(lo + hi - 1) / 2.0 * bin_hz for lo, hi in self.bin_ranges])

    @classmethod
    def default(cls, fft_size=128, rate=16000):
        ranges = []
        lo = _DEFAULT_FIRST_BIN
        for width in _DEFAULT_BIN_WIDTHS:
            ranges.append((lo, lo + width))
            lo += width
        return cls(bin_ranges=ranges, fft_size=fft_size, rate=rate)

    @classmethod
    def from_file(cls, path, fft_size=128, rate=16000):
        """Load from a plain-text table: one `channel lo_bin hi_bin` row per
        channel (half-open bins), '#' comments allowed."""
        rows = _read_table(path, 3)
        rows.sort(key=lambda r: r[0])
        if [r[0] for r in rows] != list(range(1, len(rows) + 1)):
            raise DataError(f"{path}: channel numbers must be 1..N without gaps")
        return cls(bin_ranges=[(r[1], r[2]) for r in rows],
                   fft_size=fft_size, rate=rate)


@dataclass
class MapParams:
    """Clinical map: per-electrode threshold/comfort levels plus the
    loudness growth function shape.

    base_level and saturation_level are envelope values relative to a
    full-scale sinusoid (the envelope of a full-scale tone is ~1.0);
    q_factor is the loudness-growth steepness rho.
    """

    t_levels: np.ndarray = field(default_factory=lambda: np.full(NUM_ELECTRODES, 100))
    c_levels: np.ndarray = field(default_factory=lambda: np.full(NUM_ELECTRODES, 200))
    base_level: float = 4.0 / 256.0
    saturation_level: float = 1.0
    q_factor: float = 416.2

    def __post_init__(self):
        self.t_levels = np.asarray(self.t_levels, dtype=np.int64)
        self.c_levels = np.asarray(self.c_levels, dtype=np.int64)
        if self.t_levels.shape != self.c_levels.shape:
            raise DataError("T and C level arrays must have equal length")
        if np.any(self.t_levels < 0) or np.any(self.c_levels > 255):
            raise DataError("clinical current units must lie in 0..255")
        if np.any(self.t_levels >= self.c_levels):
            raise DataError("every electrode needs T < C")
        if not (0 <= self.base_level < self.saturation_level):
            raise DataError("need 0 <= base_level < saturation_level")
        if self.q_factor <= 0:
            raise DataError("loudness growth steepness must be positive")

    @classmethod
    def from_file(cls, path):
        """Load from a plain-text table: `electrode T C` rows (electrode
        numbers 1..N) plus optional `base=`, `saturation=`, `q=` directives."""
        directives = {}
        rows = _read_table(path, 3, directives)
        rows.sort(key=lambda r: r[0])
        if [r[0] for r in rows] != list(range(1, len(rows) + 1)):
            raise DataError(f"{path}: electrode numbers must be 1..N without gaps")
        n = len(rows)
        t = np.zeros(n, dtype=np.int64)
        c = np.zeros(n, dtype=np.int64)
        # rows are electrode-numbered; store channel-ordered (ch 0 = electrode N)
        for electrode, t_lvl, c_lvl in rows:
            t[n - electrode] = t_lvl
            c[n - electrode] = c_lvl
        return cls(t_levels=t, c_levels=c,
                   base_level=directives.get("base", 4.0 / 256.0),
                   saturation_level=directives.get("saturation", 1.0),
                   q_factor=directives.get("q", 416.2))


def _read_table(path, n_cols, directives=None):
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" in line and directives is not None:
                    key, _, value = line.partition("=")
                    directives[key.strip()] = float(value)
                    continue
                parts = line.split()
                if len(parts) != n_cols:
                    raise DataError(f"{path}:{line_no}: expected {n_cols} columns")
                try:
                    rows.append(tuple(int(p) for p in parts))
                except ValueError as exc:
                    raise DataError(f"{path}:{line_no}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read table {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no table rows found")
    return rows


@dataclass
class AceConfig:
    analysis_rate: int = 16000
    frame_len: int = 128
    hop: int = 16
    pre_emphasis: float = 0.97
    num_channels: int = NUM_ELECTRODES
    maxima: int = 8
    allocation: AllocationTable = None
    map_params: MapParams = None

    def __post_init__(self):
        if self.allocation is None:
            self.allocation = AllocationTable.default(self.frame_len, self.analysis_rate)
        if self.map_params is None:
            self.map_params = MapParams()
        if self.frame_len < 2 or self.frame_len & (self.frame_len - 1):
            raise DataError("frame_len must be a power of two")
        if self.hop < 1:
            raise DataError("hop must be >= 1")
        if not (1 <= self.maxima <= self.num_channels <= NUM_ELECTRODES):
            raise DataError("need 1 <= maxima <= num_channels <= 22")
        if self.allocation.num_channels != self.num_channels:
            raise DataError("allocation table channel count mismatch")
        if self.map_params.t_levels.shape[0] != self.num_channels:
            raise DataError("map parameter electrode count mismatch")
        if not (0 <= self.pre_emphasis < 1):
            raise DataError("pre-emphasis coefficient must be in [0, 1)")

    @property
    def hop_seconds(self):
        return self.hop / self.analysis_rate

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(repr((self.analysis_rate, self.frame_len, self.hop,
                       self.pre_emphasis, self.num_channels, self.maxima,
                       self.allocation.bin_ranges,
                       self.map_params.t_levels.tolist(),
                       self.map_params.c_levels.tolist(),
                       self.map_params.base_level,
                       self.map_params.saturation_level,
                       self.map_params.q_factor)).encode())
        return h.hexdigest()


@dataclass
class Electrodogram:
    """Time x channel matrix of clinical current units (0 = no stimulation).

    Column i is channel i (low to high frequency), i.e. electrode
    ``num_channels - i``.
    """

    frames: np.ndarray  # (T, num_channels) uint8
    hop_seconds: float
    config_fingerprint: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 2:
            raise DataError("electrodogram frames must be 2-D")

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def num_channels(self):
        return self.frames.shape[1]

    def to_csv(self, path):
        """One row per frame, one integer column per channel."""
        np.savetxt(path, self.frames, fmt="%d", delimiter=",")

    @classmethod
    def from_csv(cls, path, hop_seconds, config_fingerprint=""):
        frames = np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)
        if np.any(frames < 0) or np.any(frames > 255):
            raise DataError(f"{path}: current levels must lie in 0..255")
        return cls(frames=frames.astype(np.uint8), hop_seconds=hop_seconds,
                   config_fingerprint=config_fingerprint)

    def to_pgm(self, path):
        """Binary PGM raster: electrodes as rows (electrode 22 at the
        bottom), frames as columns, current level as pixel intensity."""
        if self.num_frames == 0:
            raise DataError("cannot render an empty electrodogram")
        # row 0 (top) = highest-frequency channel = electrode 1
        image = self.frames.T[::-1, :]
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (image.shape[1], image.shape[0]))
            fh.write(np.ascontiguousarray(image).tobytes())


def pre_emphasize(buf: AudioBuffer, coeff: float) -> AudioBuffer:
    """First-order high-pass emphasis: y[n] = x[n] - coeff * x[n-1]."""
    if not (0 <= coeff < 1):
        raise DataError("pre-emphasis coefficient must be in [0, 1)")
    x = buf.samples
    y = x.copy()
    y[1:] -= coeff * x[:-1]
    return AudioBuffer(samples=y, rate=buf.rate)


def _frame_matrix(x, frame_len, hop):
    n_frames = (len(x) - frame_len) // hop + 1
    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def filterbank_envelope(buf: AudioBuffer, cfg: AceConfig) -> np.ndarray:
    """Per-frame, per-channel spectral envelopes, shape (T, num_channels).

    Each frame is Hamming-windowed and FFT'd; a channel's envelope is the
    root-sum-square of its allocated bin magnitudes.  Magnitudes are scaled
    by 2/sum(window) so a full-scale sine at a bin center gives an envelope
    near 1.0, matching the map's base/saturation convention.
    """
    if buf.rate != cfg.analysis_rate:
        raise DataError(
            f"buffer rate {buf.rate} != analysis rate {cfg.analysis_rate}; resample first")
    if len(buf) < cfg.frame_len:
        raise DataError("buffer shorter than one analysis frame")
    window = np.hamming(cfg.frame_len)
    scale = 2.0 / window.sum()
    frames = _frame_matrix(buf.samples, cfg.frame_len, cfg.hop) * window
    mag_sq = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    env = np.empty((frames.shape[0], cfg.num_channels))
    for ch, (lo, hi) in enumerate(cfg.allocation.bin_ranges):
        env[:, ch] = np.sqrt(mag_sq[:, lo:hi].sum(axis=1))
    return env * scale


def select_maxima(envelopes: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n largest envelope values in one frame.

    Ties break toward the lower channel index; channels with exactly zero
    envelope are never selected.  Returns ascending channel indices.
    """
    envelopes = np.asarray(envelopes, dtype=np.float64)
    if not (1 <= n <= envelopes.shape[0]):
        raise DataError(f"maxima count {n} out of range for {envelopes.shape[0]} channels")
    order = np.argsort(-envelopes, kind="stable")[:n]
    picked = order[envelopes[order] > 0]
    return np.sort(picked)


def lgf_map(envelope_value: float, electrode: int, params: MapParams) -> int:
    """Loudness growth function: envelope amplitude to clinical current.

    v = clamp((x - base) / (saturation - base), 0, 1)
    p = log(1 + rho*v) / log(1 + rho)
    level = round(T_e + p * (C_e - T_e))        (round half to even)

    Selected channels below base map to T_e; above saturation, to C_e.
    """
    if not (0 <= electrode < params.t_levels.shape[0]):
        raise DataError(f"electrode index {electrode} out of range")
    span = params.saturation_level - params.base_level
    v = min(max((envelope_value - params.base_level) / span, 0.0), 1.0)
    p = math.log1p(params.q_factor * v) / math.log1p(params.q_factor)
    t = params.t_levels[electrode]
    c = params.c_levels[electrode]
    return int(np.rint(t + p * (c - t)))


def _lgf_map_array(values, channels, params):
    span = params.saturation_level - params.base_level
    v = np.clip((values - params.base_level) / span, 0.0, 1.0)
    p = np.log1p(params.q_factor * v) / math.log1p(params.q_factor)
    t = params.t_levels[channels]
    c = params.c_levels[channels]
    return np.rint(t + p * (c - t)).astype(np.uint8)


def encode(buf: AudioBuffer, cfg: AceConfig) -> Electrodogram:
    """Full ACE chain: pre-emphasis, band envelopes, per-frame N-of-M
    maxima selection, loudness-growth mapping of the selected channels.

    Vectorized equivalent of applying select_maxima + lgf_map frame by
    frame (same stable tie-breaking toward lower channel indices).
    """
    emphasized = pre_emphasize(buf, cfg.pre_emphasis)
    env = filterbank_envelope(emphasized, cfg)
    idx = np.argsort(-env, axis=1, kind="stable")[:, : cfg.maxima]
    vals = np.take_along_axis(env, idx, axis=1)
    levels = _lgf_map_array(vals, idx, cfg.map_params)
    levels[vals <= 0] = 0  # zero-envelope channels are never stimulated
    frames = np.zeros((env.shape[0], cfg.num_channels), dtype=np.uint8)
    np.put_along_axis(frames, idx, levels, axis=1)
    return Electrodogram(frames=frames, hop_seconds=cfg.hop_seconds,
                         config_fingerprint=cfg.fingerprint())
