"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ace as ace_mod
from . import audio as audio_mod
from . import embed as embed_mod
from . import gmm as gmm_mod
from . import harness, synth
from .config import load_config
from .errors import CisidError, DataError, NumericalError, UsageError
from .vad import trim_silence

log = logging.getLogger("cisid")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(p):
    p.add_argument("--config", help="experiment INI file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config key")


def _load_cfg(args, manifest=None):
    overrides = list(args.overrides)
    if manifest is not None:
        overrides.append(f"experiment.manifest={manifest}")
    return load_config(args.config, overrides)


def _entry_features(cfg, entries, pipe=None):
    pipe = pipe or harness._Pipeline(cfg)
    feats = {}
    for entry in entries:
        feats[entry.utt_id] = pipe.features(entry)
    return feats


def cmd_encode(args):
    cfg = _load_cfg(args, manifest="unused.csv")
    buf = audio_mod.load_wav(args.wav)
    if not args.no_vad:
        buf = trim_silence(buf, cfg.vad)
        if len(buf) == 0:
            raise DataError(f"{args.wav} is empty after VAD")
    buf = audio_mod.resample(buf, cfg.ace.analysis_rate)
    eg = ace_mod.encode(buf, cfg.ace)
    if args.out_csv:
        eg.to_csv(args.out_csv)
        print(f"wrote {eg.num_frames} frames to {args.out_csv}")
    if args.out_pgm:
        harness.plot_electrodogram(eg, args.out_pgm)
        print(f"wrote electrodogram image to {args.out_pgm}")
    if not (args.out_csv or args.out_pgm):
        raise UsageError("encode needs --out-csv and/or --out-pgm")


def _train_ubm(cfg, manifest):
    pipe = harness._Pipeline(cfg)
    feats = _entry_features(cfg, manifest.entries, pipe)
    pooled = harness._pooled_matrix(list(feats.values()))
    init = gmm_mod.kmeans_init(pooled, cfg.ubm_components, cfg.master_seed,
                               lloyd_iters=cfg.gmm.kmeans_iters)
    ubm, history = gmm_mod.em_train(init, pooled, max_iters=cfg.gmm.em_max_iters,
                                    rel_tol=cfg.gmm.em_rel_tol)
    return ubm, history, feats


def cmd_train_ubm(args):
    cfg = _load_cfg(args, manifest=args.manifest)
    manifest = harness.load_manifest(args.manifest)
    ubm, history, _ = _train_ubm(cfg, manifest)
    gmm_mod.save_gmm(ubm, args.out)
    print(f"trained {ubm.num_components}-component UBM on "
          f"{len(manifest.entries)} utterances ({len(history)} EM iterations, "
          f"final avg logL {history[-1]:.4f}); wrote {args.out}")


def cmd_train_tv(args):
    cfg = _load_cfg(args, manifest=args.manifest)
    manifest = harness.load_manifest(args.manifest)
    ubm = gmm_mod.load_gmm(args.ubm)
    feats = _entry_features(cfg, manifest.entries)
    stats = [embed_mod.bw_stats(ubm, feats[e.utt_id]) for e in manifest.entries]
    tv, history = embed_mod.train_tv(ubm, stats, rank=cfg.ivector.tv_rank,
                                     iters=cfg.ivector.tv_iters,
                                     seed=cfg.master_seed)
    embed_mod.save_tv(tv, args.out)
    print(f"trained rank-{tv.rank} TV model ({len(history)} EM iterations); "
          f"wrote {args.out}")


def cmd_train_plda(args):
    cfg = _load_cfg(args, manifest=args.manifest)
    manifest = harness.load_manifest(args.manifest)
    ubm = gmm_mod.load_gmm(args.ubm)
    tv = embed_mod.load_tv(args.tv)
    feats = _entry_features(cfg, manifest.entries)
    ivecs, labels = [], []
    for entry in manifest.entries:
        st = embed_mod.bw_stats(ubm, feats[entry.utt_id])
        ivecs.append(embed_mod.length_normalize(embed_mod.extract_ivector(tv, st)))
        labels.append(entry.speaker)
    plda, history = embed_mod.train_plda(np.stack(ivecs), labels,
                                         subspace_dim=cfg.ivector.plda_dim,
                                         iters=cfg.ivector.plda_iters,
                                         seed=cfg.master_seed)
    embed_mod.save_plda(plda, args.out)
    print(f"trained PLDA (q={plda.subspace_dim}) on {len(labels)} i-vectors "
          f"({len(history)} EM iterations); wrote {args.out}")


def cmd_enroll(args):
    cfg = _load_cfg(args, manifest=args.manifest)
    manifest = harness.load_manifest(args.manifest)
    ubm = gmm_mod.load_gmm(args.ubm)
    feats = _entry_features(cfg, manifest.entries)
    speakers = manifest.speakers()
    groups = manifest.by_speaker()
    if args.tv:
        tv = embed_mod.load_tv(args.tv)
        vectors = []
        for speaker in speakers:
            ivecs = []
            for entry in groups[speaker]:
                st = embed_mod.bw_stats(ubm, feats[entry.utt_id])
                ivecs.append(embed_mod.length_normalize(
                    embed_mod.extract_ivector(tv, st)))
            vectors.append(embed_mod.average_enrollment(ivecs))
        np.savez(args.out, kind="plda", labels=np.array(speakers),
                 vectors=np.stack(vectors), ubm_fingerprint=ubm.fingerprint())
    else:
        means = []
        for speaker in speakers:
            pooled = harness._pooled_matrix([feats[e.utt_id] for e in groups[speaker]])
            adapted = gmm_mod.map_adapt(ubm, pooled, relevance=cfg.gmm.relevance)
            means.append(adapted.model.means)
        np.savez(args.out, kind="gmm", labels=np.array(speakers),
                 means=np.stack(means), ubm_fingerprint=ubm.fingerprint())
    print(f"enrolled {len(speakers)} speakers; wrote {args.out}")


def cmd_identify(args):
    cfg = _load_cfg(args, manifest="unused.csv")
    ubm = gmm_mod.load_gmm(args.ubm)
    try:
        with np.load(args.enrollment) as data:
            kind = str(data["kind"])
            labels = [str(l) for l in data["labels"]]
            payload = {k: data[k] for k in data.files}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read enrollment file {args.enrollment}: {exc}") from exc

    buf = audio_mod.load_wav(args.wav)
    buf = trim_silence(buf, cfg.vad)
    if len(buf) == 0:
        raise DataError(f"{args.wav} is empty after VAD")
    buf = audio_mod.resample(buf, cfg.frontend_rate)
    pipe = harness._Pipeline(cfg)
    seq = pipe._features_from_audio(buf)

    if kind == "plda":
        if not (args.tv and args.plda):
            raise UsageError("PLDA enrollment needs --tv and --plda")
        tv = embed_mod.load_tv(args.tv)
        plda = embed_mod.load_plda(args.plda)
        st = embed_mod.bw_stats(ubm, seq)
        ivec = embed_mod.length_normalize(embed_mod.extract_ivector(tv, st))
        enrolled = list(zip(labels, payload["vectors"]))
        _, scores = embed_mod.identify_plda(plda, enrolled, ivec)
    else:
        models = []
        for label, means in zip(labels, payload["means"]):
            model = gmm_mod.GmmModel(weights=ubm.weights.copy(), means=means,
                                     variances=ubm.variances.copy(),
                                     variance_floor=ubm.variance_floor)
            models.append(gmm_mod.SpeakerModelGmm(model=model, label=label,
                                                  ubm_fingerprint=str(payload["ubm_fingerprint"])))
        _, scores = gmm_mod.identify_gmm(models, seq)

    ranked = sorted(zip(labels, scores), key=lambda p: -p[1])
    for rank, (label, score) in enumerate(ranked, 1):
        print(f"{rank}\t{label}\t{score:.6f}")


def cmd_evaluate(args):
    cfg = _load_cfg(args, manifest=args.manifest if args.manifest else None)
    reports = harness.run_sweep(cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    formats = [f.strip() for f in args.format.split(",") if f.strip()]
    for report in reports:
        stem = (f"report_{report.frontend}_{report.backend}_"
                f"{report.num_speakers}spk_{report.condition}")
        for fmt in formats:
            suffix = "csv" if fmt == "csv" else "md"
            path = out_dir / f"{stem}.{suffix}"
            path.write_text(harness.render_report(report, fmt), encoding="utf-8")
        print(f"{report.condition:>10s}  {report.num_speakers:3d} speakers  "
              f"{report.backend:4s}  mean {report.mean_accuracy:6.2f}%  "
              f"std {report.std_accuracy:.2f}")
    if len(reports) > 1:
        for fmt in formats:
            suffix = "csv" if fmt == "csv" else "md"
            path = out_dir / f"sweep_summary.{suffix}"
            path.write_text(harness.render_sweep(reports, fmt), encoding="utf-8")
    print(f"wrote {len(reports)} report(s) to {out_dir}")


def cmd_make_ssn(args):
    cfg = _load_cfg(args, manifest=args.manifest)
    manifest = harness.load_manifest(args.manifest)
    buffers = []
    for entry in manifest.entries:
        buf = trim_silence(audio_mod.load_wav(entry.path), cfg.vad)
        if len(buf) == 0:
            continue
        if args.rate:
            buf = audio_mod.resample(buf, args.rate)
        buffers.append(buf)
    if not buffers:
        raise DataError("no usable audio in the corpus after VAD")
    envelope = audio_mod.estimate_ltass(buffers, args.fft_size)
    envelope.save(args.out)
    print(f"estimated LTASS over {len(buffers)} utterances "
          f"({envelope.fft_size}-point grid at {envelope.rate} Hz); wrote {args.out}")


def cmd_synth_corpus(args):
    cfg = synth.SynthConfig(num_speakers=args.speakers,
                            utterances_per_speaker=args.utterances,
                            duration=args.duration, rate=args.rate,
                            seed=args.seed)
    manifest_path = synth.generate_corpus(args.out_dir, cfg)
    print(f"wrote {cfg.num_speakers * cfg.utterances_per_speaker} utterances; "
          f"manifest at {manifest_path}")


def build_parser():
    parser = _Parser(prog="cisid",
                     description="Speaker identification through a simulated "
                                 "cochlear-implant front end")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="wav -> electrodogram CSV/image")
    _add_config_args(p)
    p.add_argument("--wav", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--out-pgm")
    p.add_argument("--no-vad", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train-ubm", help="train the universal background model")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ubm)

    p = sub.add_parser("train-tv", help="train the total-variability matrix")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tv)

    p = sub.add_parser("train-plda", help="train the PLDA model")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--tv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_plda)

    p = sub.add_parser("enroll", help="build speaker enrollment from a manifest")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--tv", help="enroll i-vectors instead of MAP models")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("identify", help="rank enrolled speakers for one wav")
    _add_config_args(p)
    p.add_argument("--wav", required=True)
    p.add_argument("--ubm", required=True)
    p.add_argument("--enrollment", required=True)
    p.add_argument("--tv")
    p.add_argument("--plda")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("evaluate", help="run a full experiment and emit reports")
    _add_config_args(p)
    p.add_argument("--manifest", help="overrides experiment.manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", default="csv,markdown")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("make-ssn", help="estimate a speech-shaped-noise profile")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fft-size", type=int, default=1024)
    p.add_argument("--rate", type=int, help="resample corpus before estimation")
    p.set_defaults(func=cmd_make_ssn)

    p = sub.add_parser("synth-corpus", help="generate the synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--speakers", type=int, default=50)
    p.add_argument("--utterances", type=int, default=20)
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--rate", type=int, default=16000)
    p.add_argument("--seed", type=int, default=202406)
    p.set_defaults(func=cmd_synth_corpus)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, CisidError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
