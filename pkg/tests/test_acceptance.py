"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The accuracy criteria run on the bundled synthetic corpus (50 source-filter
voices, 20 utterances x 3 s each, the `synth-corpus` command's defaults).
Back-end sizes are scaled for desk hardware via config keys; tolerances are
asserted exactly as stated.

Run with `pytest tests/test_acceptance.py -v -s`.
"""

import subprocess
import sys
import time

import mpmath
import numpy as np
import pytest
from scipy import linalg as sla
from scipy.stats import multivariate_normal

from cisid import ace, audio, embed, gmm, harness, synth, vad
from cisid.config import load_config
from tests.conftest import random_diag_gmm
from tests.test_audio import _third_octave_mismatch_db
from tests.test_embed import _plda_data, _synthetic_stats


def _verdict(criterion, passed, detail):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} — {detail}")
    assert passed, f"criterion {criterion}: {detail}"


@pytest.fixture(scope="session")
def corpus50(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_corpus")
    return synth.generate_corpus(out, synth.SynthConfig())


def _overrides(manifest, **kw):
    base = {
        "experiment.manifest": manifest,
        "gmm.em_max_iters": 10,
        "gmm.kmeans_iters": 10,
        "gmm.num_components": 32,
        "ivector.ubm_components": 32,
        "ivector.tv_rank": 50,
        "ivector.tv_iters": 5,
        "ivector.plda_dim": 25,
        "ivector.plda_iters": 8,
    }
    base.update(kw)
    return [f"{k}={v}" for k, v in base.items()]


def test_criterion_1_clean_pipeline_both_backends(corpus50):
    """CI front end + both back ends, 12 speakers, 75/25, 10 repetitions:
    mean accuracy >= 90% each, combined runtime <= 10 minutes."""
    t0 = time.perf_counter()
    means = {}
    cache = {}  # clean features are identical for both back ends
    for backend in ("gmm", "plda"):
        cfg = load_config(None, _overrides(
            corpus50, **{"experiment.backend": backend,
                         "experiment.num_speakers": 12,
                         "experiment.repetitions": 10}))
        report, = harness.run_experiment(cfg, cache=cache)
        means[backend] = report.mean_accuracy
    elapsed = time.perf_counter() - t0
    ok = all(m >= 90.0 for m in means.values()) and elapsed <= 600.0
    _verdict(1, ok, f"mean accuracy gmm={means['gmm']:.2f}%, "
                    f"plda={means['plda']:.2f}% (>=90 required); "
                    f"runtime {elapsed:.0f}s (<=600 required)")


def test_criterion_2_speaker_count_degradation(corpus50):
    """Nested 4->12->24->36->50 sweep, clean: mean accuracy non-increasing
    within a 3-point tolerance per step."""
    cfg = load_config(None, _overrides(
        corpus50, **{"experiment.num_speakers": "4,12,24,36,50",
                     "experiment.repetitions": 2}))
    reports = harness.run_sweep(cfg)
    accs = [r.mean_accuracy for r in reports]
    steps_ok = all(b <= a + 3.0 for a, b in zip(accs, accs[1:]))
    detail = " -> ".join(f"{r.num_speakers}spk {r.mean_accuracy:.2f}%"
                         for r in reports)
    _verdict(2, steps_ok, detail + " (each step may rise at most 3 points)")


def test_criterion_3_noise_degradation(corpus50):
    """24 speakers, training always clean: accuracy(clean) - accuracy(10 dB
    WGN) >= 15 points and accuracy(10 dB SSN) <= accuracy(clean)."""
    cfg = load_config(None, _overrides(
        corpus50, **{"experiment.num_speakers": 24,
                     "experiment.repetitions": 3,
                     "experiment.noise": "none,wgn,ssn",
                     "experiment.snr_db": 10}))
    reports = {r.condition: r for r in harness.run_experiment(cfg)}
    clean = reports["clean"].mean_accuracy
    wgn = reports["wgn10dB"].mean_accuracy
    ssn = reports["ssn10dB"].mean_accuracy
    ok = (clean - wgn >= 15.0) and (ssn <= clean)
    _verdict(3, ok, f"clean {clean:.2f}%, wgn {wgn:.2f}% (drop "
                    f"{clean - wgn:.2f} >= 15), ssn {ssn:.2f}% (<= clean)")


def test_criterion_4_mixture_sweep_completes(corpus50, tmp_path):
    """GMM-UBM at K in {8, 64, 512} completes via the CLI with exit code 0
    and emits one report per K."""
    results = {}
    for k in (8, 64, 512):
        out = tmp_path / f"k{k}"
        res = subprocess.run(
            [sys.executable, "-m", "cisid.cli", "evaluate",
             "--manifest", str(corpus50), "--out-dir", str(out),
             "--format", "csv",
             "--set", "experiment.num_speakers=4",
             "--set", "experiment.repetitions=1",
             "--set", f"gmm.num_components={k}",
             "--set", "gmm.em_max_iters=5",
             "--set", "gmm.kmeans_iters=5"],
            capture_output=True, text=True)
        report = out / "report_ci_gmm_4spk_clean.csv"
        results[k] = (res.returncode, report.is_file())
    ok = all(code == 0 and exists for code, exists in results.values())
    _verdict(4, ok, "; ".join(f"K={k}: exit {code}, report {'yes' if e else 'NO'}"
                              for k, (code, e) in results.items()))


def test_criterion_5_em_monotonicity():
    """GMM EM avg log-likelihood non-decreasing within 1e-8 on 100 random
    datasets; TV and PLDA objectives non-decreasing within 1e-6."""
    worst_gmm = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 6))
        d = int(rng.integers(2, 5))
        x = rng.standard_normal((400, d)) * rng.uniform(0.5, 2.0, d) \
            + rng.uniform(-3, 3, d)
        init = gmm.kmeans_init(x, k, seed=seed)
        _, history = gmm.em_train(init, x, max_iters=12, rel_tol=0.0)
        if len(history) > 1:
            worst_gmm = min(worst_gmm, float(np.min(np.diff(history))))

    worst_tv = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        w, m, v = random_diag_gmm(rng, 2, 3)
        ubm = gmm.GmmModel(weights=w, means=m, variances=v, variance_floor=1e-8)
        stats = _synthetic_stats(rng, ubm, rng.standard_normal((6, 2)), 25)
        _, history = embed.train_tv(ubm, stats, rank=2, iters=6, seed=seed)
        worst_tv = min(worst_tv, float(np.min(np.diff(history))))

    worst_plda = 0.0
    for seed in range(20):
        rng = np.random.default_rng(2000 + seed)
        v_true = rng.standard_normal((4, 2))
        x, labels = _plda_data(rng, v_true, 0.5 * np.eye(4), 15, 6)
        _, history = embed.train_plda(x, labels, subspace_dim=2, iters=8, seed=seed)
        worst_plda = min(worst_plda, float(np.min(np.diff(history))))

    ok = worst_gmm >= -1e-8 and worst_tv >= -1e-6 and worst_plda >= -1e-6
    _verdict(5, ok, f"worst EM step {worst_gmm:.2e} (>= -1e-8); worst TV step "
                    f"{worst_tv:.2e}, worst PLDA step {worst_plda:.2e} (>= -1e-6)")


def test_criterion_6_oracle_equivalences():
    """(a) GMM logL vs direct high-precision summation, 1e-8; (b) scalar
    i-vector closed form, 1e-12; (c) PLDA LLR vs explicit joint Gaussians,
    1e-6; (d) LGF midpoint vs independent evaluation, exact after rounding."""
    rng = np.random.default_rng(42)

    # (a) mpmath density oracle
    w, m, v = random_diag_gmm(rng, 3, 4)
    model = gmm.GmmModel(weights=w, means=m, variances=v, variance_floor=1e-8)
    x = rng.standard_normal((5, 4))
    mpmath.mp.dps = 40
    total = mpmath.mpf(0)
    for frame in x:
        dens = mpmath.mpf(0)
        for k in range(3):
            quad = mpmath.mpf(0)
            norm = mpmath.mpf(1)
            for d in range(4):
                quad += (mpmath.mpf(frame[d]) - mpmath.mpf(m[k, d])) ** 2 \
                    / mpmath.mpf(v[k, d])
                norm /= mpmath.sqrt(2 * mpmath.pi * mpmath.mpf(v[k, d]))
            dens += mpmath.mpf(w[k]) * norm * mpmath.exp(-quad / 2)
        total += mpmath.log(dens)
    err_a = abs(gmm.log_likelihood(model, x) - float(total / 5))

    # (b) scalar i-vector closed form
    sigma2, t_val, n_val, f_val = 0.8, 0.6, 12.0, 3.5
    ubm1 = gmm.GmmModel(weights=np.array([1.0]), means=np.zeros((1, 1)),
                        variances=np.array([[sigma2]]), variance_floor=1e-10)
    tv = embed.TvModel(t_matrix=np.array([[t_val]]), rank=1, num_components=1,
                       dim=1, sigma=np.array([[sigma2]]),
                       ubm_fingerprint=ubm1.fingerprint())
    stats = embed.BaumWelchStats(n=np.array([n_val]), f=np.array([[f_val]]),
                                 ubm_fingerprint=ubm1.fingerprint())
    closed = (t_val * f_val / sigma2) / (1.0 + t_val**2 * n_val / sigma2)
    err_b = abs(embed.extract_ivector(tv, stats)[0] - closed)

    # (c) PLDA joint-Gaussian oracle
    r = 5
    v_mat = rng.standard_normal((r, 2))
    a = rng.standard_normal((r, r))
    plda = embed.PldaModel(mean=rng.standard_normal(r), v=v_mat,
                           sigma_w=a @ a.T + r * np.eye(r))
    sigma_b = v_mat @ v_mat.T
    sigma_t = sigma_b + plda.sigma_w
    mu2 = np.concatenate([plda.mean, plda.mean])
    same = np.block([[sigma_t, sigma_b], [sigma_b, sigma_t]])
    diff = sla.block_diag(sigma_t, sigma_t)
    err_c = 0.0
    for _ in range(10):
        e, t = rng.standard_normal(r), rng.standard_normal(r)
        z = np.concatenate([e, t])
        oracle = (multivariate_normal.logpdf(z, mean=mu2, cov=same)
                  - multivariate_normal.logpdf(z, mean=mu2, cov=diff))
        err_c = max(err_c, abs(embed.plda_score(plda, e, t) - oracle))

    # (d) LGF midpoint
    params = ace.MapParams()
    mpmath.mp.dps = 50
    rho = mpmath.mpf("416.2")
    oracle_level = int(mpmath.nint(100 + 100 * mpmath.log(1 + rho / 2)
                                   / mpmath.log(1 + rho)))
    mid = (params.base_level + params.saturation_level) / 2
    got = ace.lgf_map(mid, 0, params)
    ok = err_a < 1e-8 and err_b < 1e-12 and err_c < 1e-6 \
        and got == oracle_level == 189
    _verdict(6, ok, f"gmm-logL err {err_a:.2e} (<1e-8); scalar i-vector err "
                    f"{err_b:.2e} (<1e-12); PLDA LLR err {err_c:.2e} (<1e-6); "
                    f"LGF midpoint {got} == oracle {oracle_level}")


def test_criterion_7_encoder_invariants():
    """1000 random utterances: frame sparsity <= N, nonzero levels within
    [T_e, C_e], exact frame-count formula."""
    cfg = ace.AceConfig()
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(cfg.frame_len, 4000))
        x = rng.standard_normal(n) * rng.uniform(0.01, 0.5)
        if rng.random() < 0.5:  # add a tone so selection has structure
            freq = rng.uniform(100, 7800)
            x += rng.uniform(0.05, 0.5) * np.sin(
                2 * np.pi * freq * np.arange(n) / cfg.analysis_rate)
        eg = ace.encode(audio.AudioBuffer(samples=np.clip(x, -1, 1),
                                          rate=cfg.analysis_rate), cfg)
        if eg.num_frames != (n - cfg.frame_len) // cfg.hop + 1:
            violations += 1
        if np.any(np.count_nonzero(eg.frames, axis=1) > cfg.maxima):
            violations += 1
        active = eg.frames[eg.frames > 0]
        if active.size and (active.min() < 100 or active.max() > 200):
            violations += 1
    _verdict(7, violations == 0,
             f"{violations} invariant violations over 1000 utterances")


def test_criterion_8_noise_exactness(corpus50):
    """mix_at_snr within 0.01 dB over 100 random triples; SSN long-term
    spectrum within +-3 dB per 1/3-octave band at 1e6 samples."""
    rng = np.random.default_rng(8)
    worst_snr = 0.0
    for i in range(100):
        n = int(rng.integers(4000, 20000))
        clean = audio.AudioBuffer(
            samples=np.convolve(rng.standard_normal(n),
                                np.ones(4) / 4, mode="same") * 0.1,
            rate=16000)
        noise = audio.gen_wgn(n, 16000, 1000 + i)
        snr = float(rng.uniform(-5.0, 30.0))
        mixed = audio.mix_at_snr(clean, noise, snr)
        added = mixed.samples - clean.samples
        achieved = 10 * np.log10(clean.power() / np.mean(added**2))
        worst_snr = max(worst_snr, abs(achieved - snr))

    manifest = harness.load_manifest(corpus50)
    bufs = []
    for entry in manifest.entries[:30]:
        buf = vad.trim_silence(audio.load_wav(entry.path), vad.VadConfig())
        bufs.append(buf)
    target = audio.estimate_ltass(bufs, 1024)
    ssn = audio.gen_ssn(target, 10**6, 16000, 88)
    measured = audio.estimate_ltass([ssn], 1024)
    mismatch = _third_octave_mismatch_db(target, measured)
    ok = worst_snr <= 0.01 and mismatch <= 3.0
    _verdict(8, ok, f"worst SNR error {worst_snr:.2e} dB (<=0.01); worst "
                    f"1/3-octave mismatch {mismatch:.2f} dB (<=3)")


def test_criterion_9_reproducible_reports(corpus50, tmp_path):
    """Two `evaluate` runs with identical config and master seed produce
    byte-identical CSV reports."""
    args = [sys.executable, "-m", "cisid.cli", "evaluate",
            "--manifest", str(corpus50), "--format", "csv",
            "--set", "experiment.num_speakers=4",
            "--set", "experiment.repetitions=1",
            "--set", "experiment.noise=none,wgn",
            "--set", "experiment.master_seed=31337",
            "--set", "gmm.num_components=8",
            "--set", "gmm.em_max_iters=5",
            "--set", "gmm.kmeans_iters=5"]
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        res = subprocess.run(args + ["--out-dir", str(out)],
                             capture_output=True, text=True)
        assert res.returncode == 0, res.stderr
        blobs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    expected = {"report_ci_gmm_4spk_clean.csv", "report_ci_gmm_4spk_wgn10dB.csv",
                "sweep_summary.csv"}
    same = blobs[0] == blobs[1] and set(blobs[0]) == expected
    _verdict(9, same, f"{len(blobs[0])} CSV files, byte-identical across runs: "
                      f"{blobs[0] == blobs[1]}")
