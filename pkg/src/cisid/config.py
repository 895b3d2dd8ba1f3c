"""Declarative experiment configuration: dataclasses, the INI config file
format and `section.key=value` command-line overrides."""

import configparser
import hashlib
import math
from dataclasses import dataclass, field

from .ace import AceConfig, AllocationTable, MapParams
from .errors import UsageError
from .frontend import MfccConfig
from .vad import VadConfig

FRONTENDS = ("ci", "mfcc")
BACKENDS = ("gmm", "plda")
NOISE_KINDS = ("none", "wgn", "ssn")


@dataclass(frozen=True)
class NoiseCondition:
    kind: str  # none | wgn | ssn
    snr_db: float = math.inf

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise UsageError(f"unknown noise kind {self.kind!r}")
        if self.kind == "none" and not math.isinf(self.snr_db):
            raise UsageError("the clean condition takes no SNR")

    @property
    def label(self):
        if self.kind == "none":
            return "clean"
        return f"{self.kind}{self.snr_db:g}dB"


@dataclass
class FeatureConfig:
    normalize: bool = True
    deltas: bool = True
    delta_window: int = 2
    cmvn: bool = True


@dataclass
class GmmBackendConfig:
    num_components: int = 512
    relevance: float = 16.0
    em_max_iters: int = 50
    em_rel_tol: float = 1e-5
    kmeans_iters: int = 20


@dataclass
class IvectorBackendConfig:
    ubm_components: int = 0  # 0 = inherit the GMM back end's component count
    tv_rank: int = 100
    tv_iters: int = 10
    plda_dim: int = 50
    plda_iters: int = 10


@dataclass
class NoiseConfig:
    ssn_fft_size: int = 1024
    ssn_taps: int = 1023


@dataclass
class ExperimentConfig:
    manifest_path: str
    frontend: str = "ci"
    backend: str = "gmm"
    train_fraction: float = 0.75
    num_speakers: object = "all"  # int, "all", or list of ints (sweep)
    conditions: list = field(default_factory=lambda: [NoiseCondition("none")])
    repetitions: int = 10
    master_seed: int = 0
    vad: VadConfig = field(default_factory=VadConfig)
    ace: AceConfig = field(default_factory=AceConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    gmm: GmmBackendConfig = field(default_factory=GmmBackendConfig)
    ivector: IvectorBackendConfig = field(default_factory=IvectorBackendConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.frontend not in FRONTENDS:
            raise UsageError(f"frontend must be one of {FRONTENDS}")
        if self.backend not in BACKENDS:
            raise UsageError(f"backend must be one of {BACKENDS}")
        if not (0.0 < self.train_fraction < 1.0):
            raise UsageError("train_fraction must lie in (0, 1)")
        if self.repetitions < 1:
            raise UsageError("repetitions must be >= 1")
        if not self.conditions:
            raise UsageError("at least one noise condition is required")

    @property
    def frontend_rate(self):
        return self.ace.analysis_rate if self.frontend == "ci" else self.mfcc.sample_rate

    @property
    def ubm_components(self):
        if self.backend == "plda" and self.ivector.ubm_components > 0:
            return self.ivector.ubm_components
        return self.gmm.num_components

    def speaker_counts(self):
        """The num_speakers field as a list (possibly ['all'])."""
        if isinstance(self.num_speakers, list):
            return list(self.num_speakers)
        return [self.num_speakers]

    def fingerprint(self):
        parts = [self.manifest_path, self.frontend, self.backend,
                 repr(self.train_fraction), repr(self.num_speakers),
                 ",".join(c.label for c in self.conditions),
                 repr(self.repetitions), repr(self.master_seed)]
        for sub in (self.vad, self.mfcc, self.features, self.gmm,
                    self.ivector, self.noise):
            parts.append(repr(sub))
        parts.append(self.ace.fingerprint())
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()


def _parse_num_speakers(text):
    text = text.strip().lower()
    if text == "all":
        return "all"
    counts = [int(p) for p in text.split(",") if p.strip()]
    if not counts or any(c < 1 for c in counts):
        raise UsageError(f"bad num_speakers value {text!r}")
    return counts if len(counts) > 1 else counts[0]


def _parse_conditions(noise_text, snr_db):
    conditions = []
    for kind in (p.strip().lower() for p in noise_text.split(",")):
        if not kind:
            continue
        if kind == "none":
            conditions.append(NoiseCondition("none"))
        else:
            conditions.append(NoiseCondition(kind, snr_db))
    if not conditions:
        raise UsageError(f"no noise conditions in {noise_text!r}")
    return conditions


def _section(parser, name):
    return parser[name] if parser.has_section(name) else {}


def _get(section, key, cast, default):
    if key not in section:
        return default
    raw = section[key] if isinstance(section, dict) else section.get(key)
    try:
        if cast is bool:
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        return cast(raw)
    except ValueError as exc:
        raise UsageError(f"bad config value {key} = {raw!r}: {exc}") from exc


def load_config(path=None, overrides=()):
    """Build an ExperimentConfig from an INI file plus overrides.

    Overrides are `section.key=value` strings and take precedence over the
    file; a missing file means all defaults.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from exc
        except configparser.Error as exc:
            raise UsageError(f"malformed config file {path}: {exc}") from exc
    for item in overrides:
        try:
            dotted, value = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
        except ValueError as exc:
            raise UsageError(
                f"override {item!r} must look like section.key=value") from exc
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key.strip(), value.strip())

    exp = _section(parser, "experiment")
    manifest = _get(exp, "manifest", str, None)
    if manifest is None:
        raise UsageError("config is missing experiment.manifest")

    vad_sec = _section(parser, "vad")
    vad = VadConfig(
        frame_ms=_get(vad_sec, "frame_ms", float, 10.0),
        energy_floor_db=_get(vad_sec, "energy_floor_db", float, 35.0),
        hangover_frames=_get(vad_sec, "hangover_frames", int, 5),
        min_segment_ms=_get(vad_sec, "min_segment_ms", float, 50.0),
    )

    ace_sec = _section(parser, "ace")
    analysis_rate = _get(ace_sec, "analysis_rate", int, 16000)
    frame_len = _get(ace_sec, "frame_len", int, 128)
    allocation_file = _get(ace_sec, "allocation_file", str, None)
    map_file = _get(ace_sec, "map_file", str, None)
    allocation = (AllocationTable.from_file(allocation_file, frame_len, analysis_rate)
                  if allocation_file else None)
    map_params = MapParams.from_file(map_file) if map_file else None
    ace = AceConfig(
        analysis_rate=analysis_rate,
        frame_len=frame_len,
        hop=_get(ace_sec, "hop", int, 16),
        pre_emphasis=_get(ace_sec, "pre_emphasis", float, 0.97),
        num_channels=_get(ace_sec, "num_channels", int, 22),
        maxima=_get(ace_sec, "maxima", int, 8),
        allocation=allocation,
        map_params=map_params,
    )

    mfcc_sec = _section(parser, "mfcc")
    mfcc = MfccConfig(
        num_mel_filters=_get(mfcc_sec, "num_mel_filters", int, 40),
        num_ceps=_get(mfcc_sec, "num_ceps", int, 19),
        frame_len=_get(mfcc_sec, "frame_len", int, 400),
        hop=_get(mfcc_sec, "hop", int, 160),
        sample_rate=_get(mfcc_sec, "sample_rate", int, 16000),
        include_c0=_get(mfcc_sec, "include_c0", bool, False),
        fft_size=_get(mfcc_sec, "fft_size", int, 512),
    )

    feat_sec = _section(parser, "features")
    features = FeatureConfig(
        normalize=_get(feat_sec, "normalize", bool, True),
        deltas=_get(feat_sec, "deltas", bool, True),
        delta_window=_get(feat_sec, "delta_window", int, 2),
        cmvn=_get(feat_sec, "cmvn", bool, True),
    )

    gmm_sec = _section(parser, "gmm")
    gmm = GmmBackendConfig(
        num_components=_get(gmm_sec, "num_components", int, 512),
        relevance=_get(gmm_sec, "relevance", float, 16.0),
        em_max_iters=_get(gmm_sec, "em_max_iters", int, 50),
        em_rel_tol=_get(gmm_sec, "em_rel_tol", float, 1e-5),
        kmeans_iters=_get(gmm_sec, "kmeans_iters", int, 20),
    )

    iv_sec = _section(parser, "ivector")
    ivector = IvectorBackendConfig(
        ubm_components=_get(iv_sec, "ubm_components", int, 0),
        tv_rank=_get(iv_sec, "tv_rank", int, 100),
        tv_iters=_get(iv_sec, "tv_iters", int, 10),
        plda_dim=_get(iv_sec, "plda_dim", int, 50),
        plda_iters=_get(iv_sec, "plda_iters", int, 10),
    )

    noise_sec = _section(parser, "noise")
    noise = NoiseConfig(
        ssn_fft_size=_get(noise_sec, "ssn_fft_size", int, 1024),
        ssn_taps=_get(noise_sec, "ssn_taps", int, 1023),
    )

    snr_db = _get(exp, "snr_db", float, 10.0)
    return ExperimentConfig(
        manifest_path=manifest,
        frontend=_get(exp, "frontend", str, "ci").lower(),
        backend=_get(exp, "backend", str, "gmm").lower(),
        train_fraction=_get(exp, "train_fraction", float, 0.75),
        num_speakers=_parse_num_speakers(_get(exp, "num_speakers", str, "all")),
        conditions=_parse_conditions(_get(exp, "noise", str, "none"), snr_db),
        repetitions=_get(exp, "repetitions", int, 10),
        master_seed=_get(exp, "master_seed", int, 0),
        vad=vad, ace=ace, mfcc=mfcc, features=features,
        gmm=gmm, ivector=ivector, noise=noise,
    )
