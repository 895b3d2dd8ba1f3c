"""Audio ingestion, resampling, noise synthesis and exact-SNR mixing.

All functions are pure: buffers are never modified in place, and the noise
generators are deterministic functions of their seed.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin2, oaconvolve, resample_poly

from .errors import DataError

log = logging.getLogger(__name__)

# Sentinel SNR meaning "no noise added"; mix_at_snr returns the clean signal.
CLEAN_SNR = math.inf


@dataclass
class AudioBuffer:
    """Mono sample sequence with its sampling rate.

    samples: 1-D float64 array of amplitudes, nominally in [-1, 1]
    rate: sampling frequency in Hz
    """

    samples: np.ndarray
    rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("AudioBuffer requires a 1-D sample array")
        if self.rate <= 0:
            raise DataError(f"sampling rate must be positive, got {self.rate}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise DataError("AudioBuffer contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.rate

    def power(self):
        """Mean squared amplitude."""
        if len(self) == 0:
            return 0.0
        return float(np.mean(self.samples**2))


@dataclass
class SpectralEnvelope:
    """Long-term average magnitude spectrum on an rfft bin grid."""

    magnitudes: np.ndarray  # (fft_size // 2 + 1,), unit RMS band power
    fft_size: int
    rate: int

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if self.magnitudes.shape != (self.fft_size // 2 + 1,):
            raise DataError("envelope length must be fft_size//2 + 1")
        if np.any(self.magnitudes < 0) or not np.all(np.isfinite(self.magnitudes)):
            raise DataError("envelope magnitudes must be finite and >= 0")

    def save(self, path):
        np.savez(path, magnitudes=self.magnitudes,
                 fft_size=self.fft_size, rate=self.rate)

    @classmethod
    def load(cls, path):
        try:
            with np.load(path) as data:
                return cls(magnitudes=data["magnitudes"],
                           fft_size=int(data["fft_size"]),
                           rate=int(data["rate"]))
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read spectral envelope {path}: {exc}") from exc


_PCM_SCALE = {
    np.dtype(np.int16): 1.0 / 32768.0,
    np.dtype(np.int32): 1.0 / 2147483648.0,
}


def load_wav(path) -> AudioBuffer:
    """Read a PCM RIFF WAV file as a mono AudioBuffer.

    Multichannel input is averaged to mono; integer PCM is scaled to [-1, 1].
    16/32-bit integer and 32/64-bit float encodings are accepted.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise DataError(f"cannot open WAV file {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"unsupported WAV encoding in {path}: {exc}") from exc
    if data.size == 0:
        raise DataError(f"WAV file {path} contains no samples")
    if data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in _PCM_SCALE:
        samples = data.astype(np.float64) * _PCM_SCALE[data.dtype]
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise DataError(f"unsupported WAV sample format {data.dtype} in {path}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioBuffer(samples=samples, rate=int(rate))


def save_wav(path, buf: AudioBuffer):
    """Write a buffer as 16-bit PCM at the buffer's rate (values clipped)."""
    pcm = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, buf.rate, pcm)


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resampling to target_rate.

    Output length is round(len * target_rate / rate).  Equal rates are a
    bit-identical passthrough.
    """
    if target_rate <= 0:
        raise DataError(f"target rate must be positive, got {target_rate}")
    if target_rate == buf.rate:
        return AudioBuffer(samples=buf.samples.copy(), rate=buf.rate)
    if len(buf) == 0:
        return AudioBuffer(samples=np.zeros(0), rate=target_rate)
    ratio = Fraction(target_rate, buf.rate)
    out = resample_poly(buf.samples, ratio.numerator, ratio.denominator)
    want = int(round(len(buf) * target_rate / buf.rate))
    if out.shape[0] > want:
        out = out[:want]
    elif out.shape[0] < want:
        out = np.pad(out, (0, want - out.shape[0]))
    return AudioBuffer(samples=out, rate=target_rate)


def gen_wgn(length: int, rate: int, seed) -> AudioBuffer:
    """White Gaussian noise: i.i.d. N(0, 1) samples, deterministic per seed."""
    if length <= 0:
        raise DataError(f"noise length must be positive, got {length}")
    rng = np.random.default_rng(seed)
    return AudioBuffer(samples=rng.standard_normal(length), rate=rate)


def estimate_ltass(corpus, fft_size: int) -> SpectralEnvelope:
    """Long-term average magnitude spectrum of a corpus.

    Hann-windowed frames with 50% overlap, averaged over every frame of
    every buffer, then normalized to unit RMS band power.  Buffers shorter
    than one frame are zero-padded to a single frame.
    """
    corpus = list(corpus)
    if not corpus:
        raise DataError("cannot estimate a spectrum from an empty corpus")
    rates = {buf.rate for buf in corpus}
    if len(rates) != 1:
        raise DataError(f"corpus mixes sample rates: {sorted(rates)}")
    window = np.hanning(fft_size)
    hop = fft_size // 2
    total = np.zeros(fft_size // 2 + 1)
    count = 0
    for buf in corpus:
        x = buf.samples
        if len(x) < fft_size:
            x = np.pad(x, (0, fft_size - len(x)))
        n_frames = (len(x) - fft_size) // hop + 1
        idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
        frames = x[idx] * window
        total += np.abs(np.fft.rfft(frames, axis=1)).sum(axis=0)
        count += n_frames
    mags = total / count
    rms = np.sqrt(np.mean(mags**2))
    if rms == 0:
        raise DataError("corpus is digital silence; spectrum undefined")
    return SpectralEnvelope(magnitudes=mags / rms, fft_size=fft_size,
                            rate=corpus[0].rate)


def gen_ssn(envelope: SpectralEnvelope, length: int, rate: int, seed,
            num_taps: int = 1023) -> AudioBuffer:
    """Speech-shaped noise: WGN filtered to the given long-term spectrum.

    A linear-phase FIR is designed on the envelope's bin grid and applied
    by overlap-add convolution; the output is scaled to unit RMS.
    Deterministic per seed.
    """
    if envelope.rate != rate:
        raise DataError(
            f"envelope rate {envelope.rate} does not match requested rate {rate}")
    if num_taps % 2 == 0:
        num_taps += 1
    freqs = np.linspace(0.0, 1.0, envelope.magnitudes.shape[0])
    taps = firwin2(num_taps, freqs, envelope.magnitudes)
    wgn = gen_wgn(length + num_taps - 1, rate, seed)
    shaped = oaconvolve(wgn.samples, taps, mode="valid")
    rms = np.sqrt(np.mean(shaped**2))
    if rms == 0:
        raise DataError("spectral envelope is all-zero; SSN undefined")
    return AudioBuffer(samples=shaped / rms, rate=rate)


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    """Add noise to clean speech at an exact SNR.

    The noise is truncated to the clean length (never looped) and scaled so
    that 10*log10(P_clean / P_noise) equals snr_db over the clean segment;
    the sum is then hard-clipped to [-1, 1] and any clipping is reported via
    a warning with the clipped-sample count.  snr_db = math.inf is the
    clean-condition sentinel and returns the clean signal unchanged.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return AudioBuffer(samples=clean.samples.copy(), rate=clean.rate)
    if clean.rate != noise.rate:
        raise DataError(f"rate mismatch: clean {clean.rate} Hz, noise {noise.rate} Hz")
    if len(noise) < len(clean):
        raise DataError("noise shorter than clean signal (noise is never looped)")
    p_clean = clean.power()
    if p_clean == 0:
        raise DataError("clean signal has zero power; SNR undefined")
    segment = noise.samples[: len(clean)]
    p_noise = float(np.mean(segment**2))
    if p_noise == 0:
        raise DataError("noise segment has zero power; cannot scale to SNR")
    scale = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = clean.samples + scale * segment
    n_clipped = int(np.count_nonzero(np.abs(mixed) > 1.0))
    if n_clipped:
        log.warning("mix_at_snr clipped %d of %d samples", n_clipped, mixed.shape[0])
        mixed = np.clip(mixed, -1.0, 1.0)
    return AudioBuffer(samples=mixed, rate=clean.rate)
