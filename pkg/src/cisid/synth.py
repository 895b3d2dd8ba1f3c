"""Desk-scale synthetic speech corpus: randomized source-filter voices.

Each synthetic speaker owns a pitch, a vocal-tract length factor and a
small inventory of formant configurations ("vowels"); an utterance is a
syllable sequence with silences, pitch drift and breath noise.  Voices are
separable in clean conditions but collapse under broadband noise, which is
what the evaluation criteria exercise.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import AudioBuffer, save_wav
from .errors import DataError


@dataclass
class SynthConfig:
    num_speakers: int = 50
    utterances_per_speaker: int = 20
    duration: float = 3.0
    rate: int = 16000
    seed: int = 202406

    def __post_init__(self):
        if self.num_speakers < 1 or self.utterances_per_speaker < 2:
            raise DataError("need >= 1 speaker and >= 2 utterances per speaker")
        if self.duration <= 0.5:
            raise DataError("utterances must be longer than 0.5 s")


@dataclass
class _Voice:
    f0_base: float
    vowels: list  # (formant_hz[4], bandwidth_hz[4]) pairs
    breath: float


def _make_voice(rng) -> _Voice:
    f0 = float(np.exp(rng.uniform(np.log(85.0), np.log(260.0))))
    tract = rng.uniform(0.88, 1.12)  # vocal-tract length factor
    vowels = []
    for _ in range(5):
        f1 = rng.uniform(300.0, 880.0)
        f2 = rng.uniform(f1 + 350.0, 2400.0)
        f3 = rng.uniform(2400.0, 3200.0)
        f4 = rng.uniform(3300.0, 4200.0)
        formants = np.array([f1, f2, f3, f4]) * tract
        bandwidths = np.array([rng.uniform(50.0, 110.0),
                               rng.uniform(70.0, 150.0),
                               rng.uniform(120.0, 220.0),
                               rng.uniform(180.0, 300.0)])
        vowels.append((formants, bandwidths))
    return _Voice(f0_base=f0, vowels=vowels, breath=rng.uniform(0.01, 0.03))


def _resonator_coeffs(freq, bandwidth, rate):
    r = np.exp(-np.pi * bandwidth / rate)
    theta = 2.0 * np.pi * freq / rate
    return [1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r]


def _syllable(voice, vowel_idx, n, f0, rng, rate):
    """One voiced syllable: glottal pulse train through formant resonators."""
    # pulse train with mild jitter; two leaky integrators give the
    # glottal -12 dB/oct source rolloff
    period = rate / f0
    pulses = np.zeros(n)
    pos = rng.uniform(0.0, period)
    while pos < n:
        pulses[int(pos)] = 1.0
        pos += period * (1.0 + 0.01 * rng.standard_normal())
    source = lfilter([1.0], [1.0, -0.96], pulses)
    source = lfilter([1.0], [1.0, -0.96], source)
    source = lfilter([1.0, -1.0], [1.0, -0.98], source)  # DC blocker
    source += voice.breath * rng.standard_normal(n)

    formants, bandwidths = voice.vowels[vowel_idx]
    out = source
    for freq, bw in zip(formants, bandwidths):
        if freq < 0.45 * rate:
            b, a = _resonator_coeffs(freq, bw, rate)
            out = lfilter(b, a, out)

    ramp = min(n // 4, int(0.02 * rate))
    envelope = np.ones(n)
    if ramp > 0:
        fade = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, ramp))
        envelope[:ramp] = fade
        envelope[-ramp:] = fade[::-1]
    peak = np.max(np.abs(out))
    if peak > 0:
        out = out / peak
    return out * envelope


def synth_utterance(voice: _Voice, duration: float, rate: int, rng) -> AudioBuffer:
    """Render one utterance: syllables, gaps and a few longer pauses."""
    total = int(duration * rate)
    samples = np.zeros(total)
    pos = int(rng.uniform(0.0, 0.05) * rate)
    syllable_count = 0
    while pos < total - int(0.08 * rate):
        length = int(rng.uniform(0.12, 0.26) * rate)
        length = min(length, total - pos)
        vowel_idx = int(rng.integers(len(voice.vowels)))
        f0 = voice.f0_base * (1.0 + 0.06 * rng.standard_normal())
        f0 = float(np.clip(f0, 60.0, 320.0))
        samples[pos : pos + length] += _syllable(voice, vowel_idx, length,
                                                 f0, rng, rate)
        pos += length
        gap = rng.uniform(0.03, 0.09)
        if syllable_count and syllable_count % 4 == 0:
            gap += rng.uniform(0.15, 0.3)  # occasional longer pause
        pos += int(gap * rate)
        syllable_count += 1
    peak = np.max(np.abs(samples))
    if peak > 0:
        samples *= 0.5 / peak
    return AudioBuffer(samples=samples, rate=rate)


def generate_corpus(out_dir, cfg: SynthConfig = None) -> Path:
    """Write the corpus WAVs plus a manifest; returns the manifest path.

    Fully deterministic per cfg.seed.
    """
    if cfg is None:
        cfg = SynthConfig()
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(cfg.seed)
    rows = []
    for spk_idx, spk_ss in enumerate(root.spawn(cfg.num_speakers)):
        label = f"spk{spk_idx:02d}"
        voice_ss, utt_root = spk_ss.spawn(2)
        voice = _make_voice(np.random.default_rng(voice_ss))
        for utt_idx, utt_ss in enumerate(utt_root.spawn(cfg.utterances_per_speaker)):
            buf = synth_utterance(voice, cfg.duration, cfg.rate,
                                  np.random.default_rng(utt_ss))
            utt_id = f"{label}_u{utt_idx:02d}"
            rel = Path("wav") / f"{utt_id}.wav"
            save_wav(out_dir / rel, buf)
            rows.append((utt_id, str(rel), label, ""))
    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# name = synth\n")
        fh.write(f"# rate = {cfg.rate}\n")
        writer = csv.writer(fh)
        writer.writerow(["id", "path", "speaker", "session"])
        writer.writerows(rows)
    return manifest_path
