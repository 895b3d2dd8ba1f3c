import numpy as np
import pytest

from cisid import harness
from cisid.audio import AudioBuffer, save_wav
from cisid.config import load_config
from cisid.errors import DataError


def _write_manifest(tmp_path, rows, header="id,path,speaker,session"):
    wav = tmp_path / "tone.wav"
    t = np.arange(8000) / 8000.0
    save_wav(wav, AudioBuffer(samples=0.5 * np.sin(2 * np.pi * 440 * t), rate=8000))
    lines = [header]
    for row in rows:
        lines.append(",".join(row))
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


class TestLoadManifest:
    def test_paper_scale_manifest_accepted(self, tmp_path):
        rows = [(f"spk{s:02d}_u{u}", "tone.wav", f"spk{s:02d}", "")
                for s in range(39) for u in range(10)]
        manifest = harness.load_manifest(_write_manifest(tmp_path, rows))
        assert len(manifest.entries) == 390
        assert len(manifest.speakers()) == 39

    def test_duplicate_id_rejected(self, tmp_path):
        rows = [("u1", "tone.wav", "a", ""), ("u1", "tone.wav", "a", "")]
        with pytest.raises(DataError, match="u1"):
            harness.load_manifest(_write_manifest(tmp_path, rows))

    def test_lonely_speaker_rejected(self, tmp_path):
        rows = [("u1", "tone.wav", "a", ""), ("u2", "tone.wav", "a", ""),
                ("u3", "tone.wav", "b", "")]
        with pytest.raises(DataError, match="'b'"):
            harness.load_manifest(_write_manifest(tmp_path, rows))

    def test_missing_file_rejected(self, tmp_path):
        rows = [("u1", "gone.wav", "a", ""), ("u2", "tone.wav", "a", "")]
        with pytest.raises(DataError, match="gone.wav"):
            harness.load_manifest(_write_manifest(tmp_path, rows))

    def test_bad_header_rejected(self, tmp_path):
        rows = [("u1", "tone.wav", "a", "")]
        with pytest.raises(DataError, match="header"):
            harness.load_manifest(_write_manifest(tmp_path, rows,
                                                  header="utt,file,who,sess"))

    def test_metadata_comments(self, tmp_path):
        path = _write_manifest(tmp_path, [("u1", "tone.wav", "a", ""),
                                          ("u2", "tone.wav", "a", "")])
        text = path.read_text()
        path.write_text("# name = demo\n# rate = 8000\n" + text)
        manifest = harness.load_manifest(path)
        assert manifest.name == "demo" and manifest.rate == 8000


class TestSplit:
    def _manifest(self, tmp_path, speakers, utts):
        rows = [(f"s{s}_u{u}", "tone.wav", f"s{s}", "")
                for s in range(speakers) for u in range(utts)]
        return harness.load_manifest(_write_manifest(tmp_path, rows))

    def test_70_30(self, tmp_path):
        manifest = self._manifest(tmp_path, 5, 10)
        train, test = harness.split_train_test(manifest, 0.7, 5, seed=0)
        assert len(train) == 35 and len(test) == 15
        for spk in manifest.speakers():
            assert sum(e.speaker == spk for e in train) == 7
            assert sum(e.speaker == spk for e in test) == 3

    def test_75_25(self, tmp_path):
        manifest = self._manifest(tmp_path, 2, 60)
        train, test = harness.split_train_test(manifest, 0.75, 2, seed=0)
        assert sum(e.speaker == "s0" for e in train) == 45
        assert sum(e.speaker == "s0" for e in test) == 15

    def test_deterministic_and_seed_sensitive(self, tmp_path):
        manifest = self._manifest(tmp_path, 6, 8)
        a = harness.split_train_test(manifest, 0.75, 4, seed=1)
        b = harness.split_train_test(manifest, 0.75, 4, seed=1)
        c = harness.split_train_test(manifest, 0.75, 4, seed=2)
        assert [e.utt_id for e in a[0]] == [e.utt_id for e in b[0]]
        assert [e.utt_id for e in a[0]] != [e.utt_id for e in c[0]]

    def test_disjoint_and_complete(self, tmp_path):
        manifest = self._manifest(tmp_path, 4, 6)
        train, test = harness.split_train_test(manifest, 0.75, 4, seed=3)
        train_ids = {e.utt_id for e in train}
        test_ids = {e.utt_id for e in test}
        assert not (train_ids & test_ids)
        speakers_train = {e.speaker for e in train}
        speakers_test = {e.speaker for e in test}
        assert speakers_train == speakers_test

    def test_nested_subsets(self, tmp_path):
        manifest = self._manifest(tmp_path, 10, 4)
        small = harness.split_train_test(manifest, 0.75, 3, seed=5)
        large = harness.split_train_test(manifest, 0.75, 7, seed=5)
        small_spk = {e.speaker for e in small[0]}
        large_spk = {e.speaker for e in large[0]}
        assert small_spk <= large_spk

    def test_infeasible_fraction(self, tmp_path):
        manifest = self._manifest(tmp_path, 2, 2)
        with pytest.raises(DataError, match="infeasible"):
            harness.split_train_test(manifest, 0.9, 2, seed=0)

    def test_too_many_speakers(self, tmp_path):
        manifest = self._manifest(tmp_path, 2, 4)
        with pytest.raises(DataError):
            harness.split_train_test(manifest, 0.75, 3, seed=0)


def _gmm_config(manifest_path, **extra):
    overrides = [
        f"experiment.manifest={manifest_path}",
        "experiment.repetitions=2",
        "experiment.num_speakers=3",
        "gmm.num_components=8",
        "gmm.em_max_iters=5",
    ]
    overrides += [f"{k}={v}" for k, v in extra.items()]
    return load_config(None, overrides)


class TestRunTrial:
    def test_single_speaker_is_always_right(self, small_corpus):
        cfg = _gmm_config(small_corpus, **{"experiment.num_speakers": 1})
        trial = harness.run_trial(cfg, 0)
        assert trial.results["clean"].accuracy == 100.0

    def test_separated_speakers_clean(self, small_corpus):
        cfg = _gmm_config(small_corpus)
        trial = harness.run_trial(cfg, 0)
        assert trial.results["clean"].accuracy >= 80.0

    def test_deterministic(self, small_corpus):
        cfg = _gmm_config(small_corpus, **{"experiment.noise": "none,wgn"})
        a = harness.run_trial(cfg, 1)
        b = harness.run_trial(cfg, 1)
        for label in a.results:
            assert a.results[label].accuracy == b.results[label].accuracy
            np.testing.assert_array_equal(a.results[label].confusion,
                                          b.results[label].confusion)

    def test_confusion_row_sums(self, small_corpus):
        cfg = _gmm_config(small_corpus)
        trial = harness.run_trial(cfg, 0)
        res = trial.results["clean"]
        manifest = harness.load_manifest(small_corpus)
        per_speaker_tests = {}
        _, test = harness.split_train_test(
            manifest, cfg.train_fraction, 3,
            np.random.SeedSequence(cfg.master_seed, spawn_key=(0,)).spawn(5)[0])
        for entry in test:
            per_speaker_tests[entry.speaker] = per_speaker_tests.get(entry.speaker, 0) + 1
        for i, spk in enumerate(manifest.speakers()):
            assert res.confusion[i].sum() == per_speaker_tests.get(spk, 0)


class TestRunExperiment:
    def test_single_repetition_stats(self, small_corpus):
        cfg = _gmm_config(small_corpus, **{"experiment.repetitions": 1})
        report, = harness.run_experiment(cfg)
        assert len(report.per_rep_accuracy) == 1
        assert report.mean_accuracy == report.per_rep_accuracy[0]
        assert report.std_accuracy == 0.0

    def test_mean_consistency(self, small_corpus):
        cfg = _gmm_config(small_corpus)
        report, = harness.run_experiment(cfg)
        assert abs(report.mean_accuracy - np.mean(report.per_rep_accuracy)) < 1e-9

    def test_accuracy_bounds_and_conditions(self, small_corpus):
        cfg = _gmm_config(small_corpus, **{"experiment.noise": "none,wgn",
                                           "experiment.snr_db": "10"})
        reports = harness.run_experiment(cfg)
        assert [r.condition for r in reports] == ["clean", "wgn10dB"]
        for report in reports:
            assert all(0.0 <= a <= 100.0 for a in report.per_rep_accuracy)

    def test_sweep_emits_report_per_count(self, small_corpus):
        cfg = _gmm_config(small_corpus, **{"experiment.num_speakers": "2,4",
                                           "experiment.repetitions": "1"})
        reports = harness.run_sweep(cfg)
        assert [r.num_speakers for r in reports] == [2, 4]

    def test_plda_backend_runs(self, small_corpus):
        cfg = _gmm_config(small_corpus, **{
            "experiment.backend": "plda",
            "experiment.num_speakers": "4",
            "experiment.repetitions": "1",
            "ivector.ubm_components": "8",
            "ivector.tv_rank": "16",
            "ivector.tv_iters": "3",
            "ivector.plda_dim": "8",
            "ivector.plda_iters": "3",
        })
        report, = harness.run_experiment(cfg)
        assert 0.0 <= report.mean_accuracy <= 100.0


class TestReports:
    def _report(self, small_corpus):
        cfg = _gmm_config(small_corpus)
        return harness.run_experiment(cfg)[0]

    def test_csv_roundtrip_exact(self, small_corpus):
        report = self._report(small_corpus)
        text = harness.render_report(report, "csv")
        back = harness.parse_report_csv(text)
        assert back.per_rep_accuracy == report.per_rep_accuracy
        assert back.mean_accuracy == report.mean_accuracy
        np.testing.assert_array_equal(back.confusion, report.confusion)
        assert back.config_fingerprint == report.config_fingerprint
        # and the re-rendered CSV is byte-identical
        assert harness.render_report(back, "csv") == text

    def test_markdown_row_count(self, small_corpus):
        report = self._report(small_corpus)
        text = harness.render_report(report, "markdown")
        rows = [l for l in text.splitlines() if l.startswith("|") and "---" not in l]
        assert len(rows) == report.repetitions + 2  # header + reps + summary

    def test_sweep_table_has_condition_columns(self, small_corpus):
        cfg = _gmm_config(small_corpus, **{"experiment.noise": "none,wgn,ssn",
                                           "experiment.repetitions": "1"})
        reports = harness.run_experiment(cfg)
        table = harness.render_sweep(reports, "markdown")
        header = table.splitlines()[0]
        for col in ("clean", "wgn10dB", "ssn10dB"):
            assert col in header

    def test_reproducible_reports(self, small_corpus):
        cfg = _gmm_config(small_corpus)
        a = harness.render_report(harness.run_experiment(cfg)[0], "csv")
        b = harness.render_report(harness.run_experiment(cfg)[0], "csv")
        assert a == b


def test_plot_electrodogram(tmp_path, rng):
    from cisid.ace import Electrodogram

    frames = np.zeros((40, 22), dtype=np.uint8)
    frames[5, 3] = 150
    eg = Electrodogram(frames=frames, hop_seconds=0.001, config_fingerprint="x")
    out = tmp_path / "eg.pgm"
    harness.plot_electrodogram(eg, out)
    blob = out.read_bytes()
    assert blob.startswith(b"P5\n40 22\n255\n")
    pixels = np.frombuffer(blob.split(b"\n", 3)[3], dtype=np.uint8)
    assert np.count_nonzero(pixels) == 1


class TestErrorTrials:
    def test_vad_emptied_test_utterance_counts_as_error(self, tmp_path):
        import csv as csv_mod

        from cisid import synth
        from cisid.audio import AudioBuffer, save_wav

        # 2 speakers with one silent utterance each; silence lands in test
        # for whoever draws it
        manifest_path = synth.generate_corpus(
            tmp_path, synth.SynthConfig(num_speakers=2, utterances_per_speaker=4,
                                        duration=1.5, seed=3))
        silent = tmp_path / "wav" / "silent.wav"
        save_wav(silent, AudioBuffer(samples=np.zeros(8000), rate=16000))
        rows = list(csv_mod.reader(
            [l for l in manifest_path.read_text().splitlines()
             if l and not l.startswith("#")]))
        rows.append(["spk00_sil", "wav/silent.wav", "spk00", ""])
        rows.append(["spk01_sil", "wav/silent.wav", "spk01", ""])
        manifest_path.write_text("\n".join(",".join(r) for r in rows))

        cfg = _gmm_config(manifest_path, **{
            "experiment.num_speakers": 2,
            "experiment.repetitions": 1,
            "experiment.train_fraction": 0.6,
            "gmm.num_components": 4,
            "gmm.em_max_iters": 3,
        })
        manifest = harness.load_manifest(manifest_path)
        total_errors = 0
        for rep in range(3):
            trial = harness.run_trial(cfg, rep, manifest=manifest)
            res = trial.results["clean"]
            assert res.confusion.sum() == res.n_trials  # nothing dropped
            total_errors += res.n_errors
            assert res.confusion[:, -1].sum() == res.n_errors
        assert total_errors > 0  # the silent utterances hit the test side


def test_argmax_score_shift_invariance(small_corpus):
    cfg = _gmm_config(small_corpus, **{"experiment.repetitions": 1})
    manifest = harness.load_manifest(small_corpus)
    from cisid import gmm as gmm_mod

    train, test = harness.split_train_test(manifest, 0.75, 3, seed=0)
    pipe = harness._Pipeline(cfg)
    feats = {e.utt_id: pipe.features(e) for e in train}
    pooled = harness._pooled_matrix(list(feats.values()))
    ubm, _ = gmm_mod.em_train(gmm_mod.kmeans_init(pooled, 4, 0), pooled,
                              max_iters=3, rel_tol=0.0)
    models = []
    for spk in sorted({e.speaker for e in train}):
        spk_feats = harness._pooled_matrix(
            [feats[e.utt_id] for e in train if e.speaker == spk])
        m = gmm_mod.map_adapt(ubm, spk_feats)
        m.label = spk
        models.append(m)
    label, scores = gmm_mod.identify_gmm(models, pipe.features(test[0]))
    assert np.argmax(scores) == np.argmax(scores + 123.45)
    assert models[int(np.argmax(scores + 123.45))].label == label
