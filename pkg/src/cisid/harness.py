"""Experiment engine: corpus manifests, split protocols, noise conditions,
repeated trials, accuracy aggregation and report emission.

Reproducibility contract: (config, master_seed) determines every report
bit-exactly at a fixed kernel thread count.  Each repetition derives its
own seed tree from (master_seed, repetition_index); speaker subsets are
permutation prefixes, so sweeps over increasing speaker counts are nested
within a repetition.
"""

import copy
import csv
import hashlib
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ace as ace_mod
from . import audio as audio_mod
from . import embed as embed_mod
from . import frontend as frontend_mod
from . import gmm as gmm_mod
from .config import ExperimentConfig, NoiseCondition
from .errors import DataError
from .vad import trim_silence

log = logging.getLogger(__name__)


@dataclass
class ManifestEntry:
    utt_id: str
    path: Path
    speaker: str
    session: str = ""


@dataclass
class CorpusManifest:
    entries: list
    name: str
    rate: int = 0  # 0 = undeclared; buffers carry their own rate

    def speakers(self):
        return sorted({e.speaker for e in self.entries})

    def by_speaker(self):
        groups = {}
        for entry in self.entries:
            groups.setdefault(entry.speaker, []).append(entry)
        return groups


def load_manifest(path) -> CorpusManifest:
    """Read and validate a corpus manifest.

    CSV with header ``id,path,speaker,session``; '#'-prefixed lines before
    the header may declare ``name`` and ``rate``.  Paths are resolved
    relative to the manifest file.  Duplicate ids, missing files and
    speakers with fewer than 2 utterances are rejected.
    """
    path = Path(path)
    meta = {}
    rows = []
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    lines = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            if value:
                meta[key.strip()] = value.strip()
            continue
        if line.strip():
            lines.append(line)
    reader = csv.DictReader(lines)
    expected = ["id", "path", "speaker", "session"]
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != expected:
        raise DataError(
            f"manifest {path} must have header {','.join(expected)}")
    for row in reader:
        if row["id"] is None or row["path"] is None or row["speaker"] is None:
            raise DataError(f"manifest {path}: malformed row {row}")
        rows.append(ManifestEntry(
            utt_id=row["id"].strip(),
            path=(path.parent / row["path"].strip()).resolve(),
            speaker=row["speaker"].strip(),
            session=(row["session"] or "").strip(),
        ))
    if not rows:
        raise DataError(f"manifest {path} contains no entries")

    seen = set()
    for entry in rows:
        if entry.utt_id in seen:
            raise DataError(f"duplicate utterance id {entry.utt_id!r}")
        seen.add(entry.utt_id)
        if not entry.path.is_file():
            raise DataError(f"missing audio file {entry.path} (utterance {entry.utt_id})")
    manifest = CorpusManifest(entries=rows, name=meta.get("name", path.stem),
                              rate=int(meta.get("rate", 0)))
    for speaker, utts in manifest.by_speaker().items():
        if len(utts) < 2:
            raise DataError(
                f"speaker {speaker!r} has {len(utts)} utterance(s); need >= 2 to split")
    return manifest


def _speaker_rng(split_seed_int, speaker):
    digest = hashlib.sha256(speaker.encode("utf-8")).digest()
    label_key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([split_seed_int, label_key]))


def split_train_test(manifest: CorpusManifest, fraction: float,
                     num_speakers, seed):
    """Per-speaker random split after sampling a speaker subset.

    Speakers are a prefix of a seeded permutation (so larger counts nest
    smaller ones at the same seed); each selected speaker contributes
    round(fraction * n) utterances to train and the rest to test.  Returns
    (train, test) entry lists grouped by speaker in enrollment order.
    """
    all_speakers = manifest.speakers()
    if num_speakers == "all":
        num_speakers = len(all_speakers)
    if not (1 <= num_speakers <= len(all_speakers)):
        raise DataError(
            f"requested {num_speakers} speakers, corpus has {len(all_speakers)}")
    seed_seq = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    split_seed_int = int(seed_seq.generate_state(1, dtype=np.uint64)[0])
    rng = np.random.default_rng(np.random.SeedSequence([split_seed_int, 0]))
    order = rng.permutation(len(all_speakers))
    chosen = [all_speakers[i] for i in order[:num_speakers]]

    groups = manifest.by_speaker()
    train, test = [], []
    for speaker in chosen:
        utts = sorted(groups[speaker], key=lambda e: e.utt_id)
        n = len(utts)
        n_train = int(round(fraction * n))
        if not (1 <= n_train <= n - 1):
            raise DataError(
                f"fraction {fraction} infeasible for speaker {speaker!r} with {n} utterances")
        perm = _speaker_rng(split_seed_int, speaker).permutation(n)
        train.extend(utts[i] for i in perm[:n_train])
        test.extend(utts[i] for i in perm[n_train:])
    return train, test


# -- per-trial pipeline -------------------------------------------------------


class _Pipeline:
    """Front-end plumbing with an experiment-scoped cache of clean
    intermediates (trimmed audio as float32, electrodograms, MFCCs)."""

    def __init__(self, cfg: ExperimentConfig, cache=None):
        self.cfg = cfg
        self.cache = cache if cache is not None else {}

    def clean_audio(self, entry) -> audio_mod.AudioBuffer:
        key = ("audio", entry.utt_id)
        if key not in self.cache:
            buf = audio_mod.load_wav(entry.path)
            buf = trim_silence(buf, self.cfg.vad)
            if len(buf) == 0:
                raise DataError(f"utterance {entry.utt_id} is empty after VAD")
            buf = audio_mod.resample(buf, self.cfg.frontend_rate)
            # cache quantizes to float32; everything downstream sees the
            # same arrays whether cached or fresh in this run
            self.cache[key] = buf.samples.astype(np.float32)
        return audio_mod.AudioBuffer(
            samples=self.cache[key].astype(np.float64), rate=self.cfg.frontend_rate)

    def features(self, entry, noise_buf=None, snr_db=math.inf) -> frontend_mod.FeatureSequence:
        clean = self.clean_audio(entry)
        if noise_buf is not None:
            mixed = audio_mod.mix_at_snr(clean, noise_buf, snr_db)
            return self._features_from_audio(mixed)
        return self._clean_features(entry, clean)

    def _clean_features(self, entry, buf):
        if self.cfg.frontend == "ci":
            key = ("eg", entry.utt_id)
            if key not in self.cache:
                self.cache[key] = ace_mod.encode(buf, self.cfg.ace)
            return self._ci_postprocess(self.cache[key])
        key = ("mfcc", entry.utt_id)
        if key not in self.cache:
            seq = frontend_mod.mfcc(buf, self.cfg.mfcc)
            self.cache[key] = seq.vectors.astype(np.float32)
        seq = frontend_mod.FeatureSequence(
            vectors=self.cache[key].astype(np.float64),
            source=frontend_mod.SOURCE_MFCC,
            frame_period=self.cfg.mfcc.hop / self.cfg.mfcc.sample_rate)
        return self._mfcc_postprocess(seq)

    def _features_from_audio(self, buf):
        if self.cfg.frontend == "ci":
            return self._ci_postprocess(ace_mod.encode(buf, self.cfg.ace))
        return self._mfcc_postprocess(frontend_mod.mfcc(buf, self.cfg.mfcc))

    def _ci_postprocess(self, eg):
        feats = self.cfg.features
        seq = frontend_mod.electrodogram_features(
            eg, normalize=feats.normalize, deltas=feats.deltas,
            delta_window=feats.delta_window)
        return frontend_mod.cmvn(seq) if feats.cmvn else seq

    def _mfcc_postprocess(self, seq):
        feats = self.cfg.features
        if feats.deltas:
            seq = frontend_mod.append_deltas(seq, feats.delta_window)
        return frontend_mod.cmvn(seq) if feats.cmvn else seq


@dataclass
class ConditionResult:
    condition: str
    accuracy: float
    confusion: np.ndarray  # (S_all, S_all + 1); last column = error trials
    n_trials: int
    n_correct: int
    n_errors: int


@dataclass
class TrialResult:
    results: dict  # condition label -> ConditionResult
    enrolled: list  # speaker labels in enrollment order
    timings: dict


def _pooled_matrix(feature_list):
    # float32 pooling bounds memory on large sweeps; models stay float64
    return np.concatenate([f.vectors.astype(np.float32) for f in feature_list])


def run_trial(cfg: ExperimentConfig, repetition_index: int,
              manifest: CorpusManifest = None, cache=None) -> TrialResult:
    """One repetition: split, train on clean data, test per condition.

    Training (UBM, MAP models or TV/PLDA plus enrollment) always uses the
    clean train partition; noise conditions apply to test utterances only.
    A test utterance that fails the front end (e.g. emptied by the VAD) is
    counted as an error trial, never dropped.
    """
    if manifest is None:
        manifest = load_manifest(cfg.manifest_path)
    counts = cfg.speaker_counts()
    if len(counts) != 1:
        raise DataError("run_trial needs a single speaker count; use run_sweep")
    root = np.random.SeedSequence(cfg.master_seed, spawn_key=(repetition_index,))
    split_ss, kmeans_ss, tv_ss, plda_ss, noise_ss = root.spawn(5)

    timings = {}
    pipe = _Pipeline(cfg, cache)
    train, test = split_train_test(manifest, cfg.train_fraction, counts[0], split_ss)

    t0 = time.perf_counter()
    train_feats = {}
    train_audio = {}
    skipped = []
    for entry in train:
        try:
            train_audio[entry.utt_id] = pipe.clean_audio(entry)
            train_feats[entry.utt_id] = pipe.features(entry)
        except DataError as exc:
            skipped.append(entry.utt_id)
            log.warning("skipping train utterance %s: %s", entry.utt_id, exc)
    enrolled = []
    for entry in train:
        if entry.speaker not in enrolled:
            enrolled.append(entry.speaker)
    for speaker in enrolled:
        if not any(e.speaker == speaker and e.utt_id in train_feats for e in train):
            raise DataError(f"speaker {speaker!r} has no usable train utterances")
    timings["frontend_train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    usable_train = [e for e in train if e.utt_id in train_feats]
    pooled = _pooled_matrix([train_feats[e.utt_id] for e in usable_train])
    k = cfg.ubm_components
    init = gmm_mod.kmeans_init(pooled, k, kmeans_ss,
                               lloyd_iters=cfg.gmm.kmeans_iters)
    ubm, _ = gmm_mod.em_train(init, pooled, max_iters=cfg.gmm.em_max_iters,
                              rel_tol=cfg.gmm.em_rel_tol)
    timings["train_ubm"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if cfg.backend == "gmm":
        models = []
        for speaker in enrolled:
            feats = _pooled_matrix([train_feats[e.utt_id] for e in usable_train
                                    if e.speaker == speaker])
            adapted = gmm_mod.map_adapt(ubm, feats, relevance=cfg.gmm.relevance)
            adapted.label = speaker
            models.append(adapted)
        classify = lambda seq: gmm_mod.identify_gmm(models, seq)[0]
    else:
        stats = [embed_mod.bw_stats(ubm, train_feats[e.utt_id]) for e in usable_train]
        tv, _ = embed_mod.train_tv(ubm, stats, rank=cfg.ivector.tv_rank,
                                   iters=cfg.ivector.tv_iters, seed=tv_ss)
        ivecs = np.stack([embed_mod.length_normalize(embed_mod.extract_ivector(tv, st))
                          for st in stats])
        labels = [e.speaker for e in usable_train]
        plda, _ = embed_mod.train_plda(ivecs, labels, subspace_dim=cfg.ivector.plda_dim,
                                       iters=cfg.ivector.plda_iters, seed=plda_ss)
        enrollment = [
            (speaker, embed_mod.average_enrollment(
                [iv for iv, lab in zip(ivecs, labels) if lab == speaker]))
            for speaker in enrolled
        ]

        def classify(seq):
            st = embed_mod.bw_stats(ubm, seq)
            ivec = embed_mod.length_normalize(embed_mod.extract_ivector(tv, st))
            return embed_mod.identify_plda(plda, enrollment, ivec)[0]

    timings["train_backend"] = time.perf_counter() - t0

    # SSN profile comes from this trial's clean train partition
    ssn_envelope = None
    if any(c.kind == "ssn" for c in cfg.conditions):
        t0 = time.perf_counter()
        ssn_envelope = audio_mod.estimate_ltass(
            list(train_audio.values()), cfg.noise.ssn_fft_size)
        timings["ssn_profile"] = time.perf_counter() - t0

    all_speakers = manifest.speakers()
    row = {s: i for i, s in enumerate(all_speakers)}
    noise_children = noise_ss.spawn(len(cfg.conditions))

    t0 = time.perf_counter()
    results = {}
    for cond, cond_ss in zip(cfg.conditions, noise_children):
        confusion = np.zeros((len(all_speakers), len(all_speakers) + 1), dtype=np.int64)
        utt_seeds = cond_ss.spawn(len(test))
        correct = errors = 0
        for entry, utt_ss in zip(test, utt_seeds):
            try:
                if cond.kind == "none":
                    seq = pipe.features(entry)
                else:
                    clean = pipe.clean_audio(entry)
                    if cond.kind == "wgn":
                        noise_buf = audio_mod.gen_wgn(len(clean), clean.rate, utt_ss)
                    else:
                        noise_buf = audio_mod.gen_ssn(ssn_envelope, len(clean),
                                                      clean.rate, utt_ss,
                                                      num_taps=cfg.noise.ssn_taps)
                    seq = pipe.features(entry, noise_buf=noise_buf, snr_db=cond.snr_db)
                predicted = classify(seq)
            except DataError as exc:
                log.warning("test utterance %s unusable under %s: %s",
                            entry.utt_id, cond.label, exc)
                confusion[row[entry.speaker], -1] += 1
                errors += 1
                continue
            confusion[row[entry.speaker], row[predicted]] += 1
            if predicted == entry.speaker:
                correct += 1
        results[cond.label] = ConditionResult(
            condition=cond.label,
            accuracy=100.0 * correct / len(test),
            confusion=confusion,
            n_trials=len(test), n_correct=correct, n_errors=errors)
    timings["score"] = time.perf_counter() - t0
    return TrialResult(results=results, enrolled=enrolled, timings=timings)


@dataclass
class EvaluationReport:
    corpus: str
    frontend: str
    backend: str
    condition: str
    num_speakers: int
    repetitions: int
    master_seed: int
    config_fingerprint: str
    speaker_labels: list
    per_rep_accuracy: list
    confusion: np.ndarray
    timings: dict = field(default_factory=dict)

    @property
    def mean_accuracy(self):
        return float(np.mean(self.per_rep_accuracy))

    @property
    def std_accuracy(self):
        return float(np.std(self.per_rep_accuracy))


def run_experiment(cfg: ExperimentConfig, manifest=None, cache=None):
    """Run all repetitions of a single-speaker-count experiment.

    Returns one EvaluationReport per configured noise condition (training
    is shared across conditions within each repetition).
    """
    if manifest is None:
        manifest = load_manifest(cfg.manifest_path)
    counts = cfg.speaker_counts()
    if len(counts) != 1:
        raise DataError("run_experiment needs a single speaker count; use run_sweep")
    if cache is None:
        cache = {}
    num = counts[0]
    if num == "all":
        num = len(manifest.speakers())

    accuracies = {c.label: [] for c in cfg.conditions}
    confusions = {c.label: np.zeros((len(manifest.speakers()),
                                     len(manifest.speakers()) + 1), dtype=np.int64)
                  for c in cfg.conditions}
    timings = {}
    for rep in range(cfg.repetitions):
        trial = run_trial(cfg, rep, manifest=manifest, cache=cache)
        for label, res in trial.results.items():
            accuracies[label].append(res.accuracy)
            confusions[label] += res.confusion
        for key, value in trial.timings.items():
            timings[key] = timings.get(key, 0.0) + value

    fingerprint = cfg.fingerprint()
    return [EvaluationReport(
        corpus=manifest.name,
        frontend=cfg.frontend,
        backend=cfg.backend,
        condition=cond.label,
        num_speakers=num,
        repetitions=cfg.repetitions,
        master_seed=cfg.master_seed,
        config_fingerprint=fingerprint,
        speaker_labels=manifest.speakers(),
        per_rep_accuracy=accuracies[cond.label],
        confusion=confusions[cond.label],
        timings=dict(timings),
    ) for cond in cfg.conditions]


def run_sweep(cfg: ExperimentConfig, manifest=None):
    """Speaker-count sweep: one run_experiment per count.

    Within a repetition the subsets are nested (permutation prefixes), so
    accuracy across counts is a paired comparison.  Returns a flat list of
    reports ordered by count, then condition.
    """
    if manifest is None:
        manifest = load_manifest(cfg.manifest_path)
    cache = {}
    reports = []
    for count in cfg.speaker_counts():
        sub = copy.deepcopy(cfg)
        sub.num_speakers = count
        reports.extend(run_experiment(sub, manifest=manifest, cache=cache))
    return reports


# -- report rendering ---------------------------------------------------------


def render_report(report: EvaluationReport, fmt: str = "csv") -> str:
    """Render one report as CSV or Markdown.

    The CSV form is byte-stable for identical runs (timings are excluded;
    they vary between runs) and parses back losslessly via
    parse_report_csv.  The Markdown form includes the runtime summary.
    """
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["section", "key", "value"])
        for key in ("corpus", "frontend", "backend", "condition"):
            writer.writerow(["config", key, getattr(report, key)])
        for key in ("num_speakers", "repetitions", "master_seed"):
            writer.writerow(["config", key, repr(getattr(report, key))])
        writer.writerow(["config", "fingerprint", report.config_fingerprint])
        for i, acc in enumerate(report.per_rep_accuracy, 1):
            writer.writerow(["repetition", repr(i), repr(acc)])
        writer.writerow(["summary", "mean_accuracy", repr(report.mean_accuracy)])
        writer.writerow(["summary", "std_accuracy", repr(report.std_accuracy)])
        writer.writerow(["confusion", "labels",
                         "|".join(report.speaker_labels + ["<error>"])])
        for label, counts in zip(report.speaker_labels, report.confusion):
            writer.writerow(["confusion", label,
                             "|".join(str(int(c)) for c in counts)])
        return out.getvalue()
    if fmt == "markdown":
        lines = [
            f"# {report.corpus}: {report.frontend}/{report.backend}, "
            f"{report.condition}, {report.num_speakers} speakers",
            "",
            "| repetition | accuracy (%) |",
            "| --- | --- |",
        ]
        for i, acc in enumerate(report.per_rep_accuracy, 1):
            lines.append(f"| {i} | {acc:.2f} |")
        lines.append(f"| mean +- std | {report.mean_accuracy:.2f} +- "
                     f"{report.std_accuracy:.2f} |")
        if report.timings:
            total = sum(report.timings.values())
            stages = ", ".join(f"{k} {v:.1f}s" for k, v in sorted(report.timings.items()))
            lines += ["", f"Runtime: {total:.1f}s ({stages})"]
        return "\n".join(lines) + "\n"
    raise DataError(f"unknown report format {fmt!r}")


def parse_report_csv(text: str) -> EvaluationReport:
    """Inverse of render_report(fmt='csv'); numeric fields round-trip exactly."""
    config = {}
    reps = {}
    labels = []
    confusion_rows = {}
    summary = {}
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != ["section", "key", "value"]:
        raise DataError("not a cisid report CSV")
    for section, key, value in reader:
        if section == "config":
            config[key] = value
        elif section == "repetition":
            reps[int(key)] = float(value)
        elif section == "summary":
            summary[key] = float(value)
        elif section == "confusion":
            if key == "labels":
                labels = value.split("|")[:-1]
            else:
                confusion_rows[key] = [int(c) for c in value.split("|")]
    per_rep = [reps[i] for i in sorted(reps)]
    confusion = np.array([confusion_rows[label] for label in labels], dtype=np.int64)
    report = EvaluationReport(
        corpus=config["corpus"], frontend=config["frontend"],
        backend=config["backend"], condition=config["condition"],
        num_speakers=int(config["num_speakers"]),
        repetitions=int(config["repetitions"]),
        master_seed=int(config["master_seed"]),
        config_fingerprint=config["fingerprint"],
        speaker_labels=labels, per_rep_accuracy=per_rep, confusion=confusion)
    if not math.isclose(report.mean_accuracy, summary["mean_accuracy"],
                        rel_tol=0, abs_tol=1e-9):
        raise DataError("report CSV is internally inconsistent")
    return report


def render_sweep(reports, fmt: str = "markdown") -> str:
    """Cross-tabulate mean accuracy: rows = speaker counts, columns = conditions."""
    counts = []
    conditions = []
    table = {}
    for rep in reports:
        if rep.num_speakers not in counts:
            counts.append(rep.num_speakers)
        if rep.condition not in conditions:
            conditions.append(rep.condition)
        table[(rep.num_speakers, rep.condition)] = rep.mean_accuracy
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["num_speakers"] + conditions)
        for count in counts:
            writer.writerow([count] + [repr(table.get((count, c), ""))
                                       for c in conditions])
        return out.getvalue()
    lines = ["| speakers | " + " | ".join(conditions) + " |",
             "| --- |" + " --- |" * len(conditions)]
    for count in counts:
        cells = " | ".join(f"{table.get((count, c), float('nan')):.2f}"
                           for c in conditions)
        lines.append(f"| {count} | {cells} |")
    return "\n".join(lines) + "\n"


def plot_electrodogram(eg: ace_mod.Electrodogram, path):
    """Fig.-2-style grayscale raster; see Electrodogram.to_pgm."""
    eg.to_pgm(path)
