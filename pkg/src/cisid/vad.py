"""Energy-based voice activity detection and silence trimming.

Frames whose short-time energy falls within ``energy_floor_db`` of the
utterance's peak frame energy are kept; the threshold is relative, so the
segmentation is invariant to waveform gain.
"""

from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer
from .errors import DataError


@dataclass
class VadConfig:
    frame_ms: float = 10.0
    energy_floor_db: float = 35.0
    hangover_frames: int = 5
    min_segment_ms: float = 50.0

    def __post_init__(self):
        if self.frame_ms <= 0:
            raise DataError("VAD frame duration must be positive")
        if self.hangover_frames < 0 or self.min_segment_ms < 0:
            raise DataError("hangover and minimum segment must be >= 0")


@dataclass
class SegmentList:
    """Ordered, non-overlapping half-open [start, end) sample intervals."""

    segments: list

    def __post_init__(self):
        prev_end = 0
        for start, end in self.segments:
            if start < prev_end or end <= start:
                raise DataError("segments must be sorted, non-overlapping, non-empty")
            prev_end = end

    def __len__(self):
        return len(self.segments)

    def total_samples(self):
        return sum(end - start for start, end in self.segments)


def _frame_energies(samples, frame_len):
    n_frames = -(-len(samples) // frame_len)  # ceil; tail counts as a frame
    energies = np.zeros(n_frames)
    for i in range(n_frames):
        chunk = samples[i * frame_len : (i + 1) * frame_len]
        energies[i] = np.mean(chunk**2)
    return energies


def detect_speech(buf: AudioBuffer, cfg: VadConfig) -> SegmentList:
    """Locate active-speech segments.

    A frame is active when its energy exceeds peak_energy * 10^(-floor/10);
    each active run is extended by ``hangover_frames``, and segments shorter
    than ``min_segment_ms`` are dropped.  Digital silence yields an empty
    list.
    """
    if len(buf) == 0:
        raise DataError("cannot run VAD on an empty buffer")
    frame_len = max(1, round(buf.rate * cfg.frame_ms / 1000.0))
    energies = _frame_energies(buf.samples, frame_len)
    peak = energies.max()
    if peak <= 0:
        return SegmentList(segments=[])
    active = energies > peak * 10.0 ** (-cfg.energy_floor_db / 10.0)

    if cfg.hangover_frames:
        extended = active.copy()
        for i in np.flatnonzero(active):
            extended[i + 1 : i + 1 + cfg.hangover_frames] = True
        active = extended

    min_len = round(buf.rate * cfg.min_segment_ms / 1000.0)
    segments = []
    n = len(buf)
    start = None
    for i, flag in enumerate(active):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            segments.append((start * frame_len, min(i * frame_len, n)))
            start = None
    if start is not None:
        segments.append((start * frame_len, n))
    segments = [(s, e) for s, e in segments if e - s >= min_len]
    return SegmentList(segments=segments)


def trim_silence(buf: AudioBuffer, cfg: VadConfig) -> AudioBuffer:
    """Concatenate the detected speech segments in their original order."""
    segs = detect_speech(buf, cfg)
    if not segs.segments:
        return AudioBuffer(samples=np.zeros(0), rate=buf.rate)
    parts = [buf.samples[start:end] for start, end in segs.segments]
    return AudioBuffer(samples=np.concatenate(parts), rate=buf.rate)
