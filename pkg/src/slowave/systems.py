"""Concrete detection systems for cross-validation and the CLI.

A cohort subject is reduced once to cached per-window arrays (smoothed
spectra for the deep detector, the eight spectral features for the
others) so that cross-validation folds only retrain models, never redo
signal processing. Window rows are ordered segment-major, channel-minor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import cnn as cnn_mod
from . import shallow
from .detect import HISTOGRAM_BIN_CHOICES, build_histogram, histogram_features
from .edf import Recording
from .errors import ConfigError, ModelError
from .preprocess import WINDOW_OVERLAP, WINDOW_S, segment_recording
from .spectral import FEATURE_NAMES, UP_FEATURES, cnn_spectrum, feature_matrix
from .synth import GroundTruth

logger = logging.getLogger(__name__)

SYSTEM_NAMES = ("uls", "ssls", "sdls")
LEVELS = ("channel", "segment", "eeg")


@dataclass
class SubjectData:
    """Cached windows of one preprocessed recording plus ground truth."""

    subject_id: str
    site: str
    eeg_label: int | None
    n_channels: int
    n_segments: int
    spectra: np.ndarray  # [n_windows x 150] float32
    features8: np.ndarray  # [n_windows x 8]
    window_labels: np.ndarray | None = None  # [n_windows]
    segment_labels: np.ndarray | None = None  # [n_segments]


def prepare_subject(
    rec: Recording,
    gt: GroundTruth | None = None,
    win_s: float = WINDOW_S,
    overlap: float = WINDOW_OVERLAP,
) -> SubjectData:
    """Reduce a preprocessed recording to cached window arrays."""
    segs = segment_recording(rec, win_s, overlap)
    windows = np.concatenate([s.data for s in segs], axis=0)
    spectra = cnn_spectrum(windows).astype(np.float32)
    features8 = feature_matrix(windows)
    window_labels = None
    segment_labels = None
    eeg_label = None
    if gt is not None:
        if gt.window_flags.shape[0] != len(segs):
            raise ValueError(
                f"ground-truth grid ({gt.window_flags.shape[0]} windows) does not "
                f"match segmentation ({len(segs)})"
            )
        window_labels = gt.window_flags.reshape(-1).astype(np.int8)
        segment_labels = gt.segment_labels.astype(np.int8)
        eeg_label = int(gt.eeg_label)
    return SubjectData(
        subject_id=rec.meta.get("subject_id", "unknown"),
        site=rec.meta.get("site_id", "unknown"),
        eeg_label=eeg_label,
        n_channels=rec.n_channels,
        n_segments=len(segs),
        spectra=spectra,
        features8=features8,
        window_labels=window_labels,
        segment_labels=segment_labels,
    )


@dataclass
class SystemConfig:
    """Which system/level to assemble and with what knobs."""

    system: str = "sdls"
    level: str = "eeg"
    n_bins: int = 10
    classifier_kind: str = "lr"
    # ULS
    uls_feature: str = "pri"
    uls_theta: float = 3.5
    normalizer_max_recordings: int = 50
    # SSLS channel detector
    shallow_kind: str = "lr"
    # SDLS channel detector
    arch: cnn_mod.CnnArch = field(default_factory=cnn_mod.CnnArch)
    train: cnn_mod.TrainConfig = field(default_factory=cnn_mod.TrainConfig)
    # windows per class per subject fed to detector training
    detector_cap_per_subject: int = 25

    def __post_init__(self) -> None:
        if self.system not in SYSTEM_NAMES:
            raise ConfigError(f"system must be one of {SYSTEM_NAMES}")
        if self.level not in LEVELS:
            raise ConfigError(f"level must be one of {LEVELS}")
        if self.n_bins not in HISTOGRAM_BIN_CHOICES:
            raise ConfigError(f"n_bins must be one of {HISTOGRAM_BIN_CHOICES}")
        if self.uls_feature not in FEATURE_NAMES:
            raise ConfigError(f"unknown ULS feature {self.uls_feature!r}")


# -- channel-level scoring over cached arrays --------------------------------


@dataclass
class _FittedDetector:
    """Scores cached windows; 'uls' also emits normalized histogram values."""

    kind: str
    uls_feature_col: int = 0
    uls_theta: float = 3.5
    uls_up: bool = True
    normalizer_c: float | None = None
    shallow_model: shallow.ShallowModel | None = None
    cnn_model: cnn_mod.CnnModel | None = None
    _cnn_fast: cnn_mod.CnnModel | None = None

    @property
    def histogram_mode(self) -> str:
        return "uls" if self.kind == "uls" else "unit"

    def scores(self, subject: SubjectData) -> np.ndarray:
        if self.kind == "uls":
            raw = subject.features8[:, self.uls_feature_col]
            hit = raw > self.uls_theta if self.uls_up else raw < self.uls_theta
            return hit.astype(np.float64)
        if self.kind == "shallow":
            return self.shallow_model.predict_score(subject.features8)
        if self._cnn_fast is None:
            self._cnn_fast = self.cnn_model.cast(np.float32)
        return self._cnn_fast.predict_scores(subject.spectra)

    def histogram_values(self, subject: SubjectData) -> np.ndarray:
        if self.kind != "uls":
            return self.scores(subject)
        if self.normalizer_c is None:
            raise ModelError("ULS histograms need a fitted normalizer")
        return subject.features8[:, self.uls_feature_col] / self.normalizer_c


def _detector_training_set(
    pool: list[SubjectData],
    use_spectra: bool,
    cap_per_subject: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for subject in pool:
        if subject.window_labels is None:
            raise ModelError(f"subject {subject.subject_id} lacks channel labels")
        source = subject.spectra if use_spectra else subject.features8
        for cls in (1, 0):
            idx = np.flatnonzero(subject.window_labels == cls)
            if idx.size == 0:
                continue
            take = min(cap_per_subject, idx.size)
            chosen = rng.choice(idx, size=take, replace=False)
            xs.append(np.asarray(source[chosen], dtype=np.float64))
            ys.append(np.full(take, cls, dtype=np.int64))
    if not xs:
        raise ModelError("empty detector training pool")
    return np.concatenate(xs), np.concatenate(ys)


def _fit_detector(
    cfg: SystemConfig,
    detector_pool: list[SubjectData],
    level_pool: list[SubjectData],
    seed: int,
) -> _FittedDetector:
    rng = np.random.default_rng(seed)
    if cfg.system == "uls":
        det = _FittedDetector(
            kind="uls",
            uls_feature_col=FEATURE_NAMES.index(cfg.uls_feature),
            uls_theta=cfg.uls_theta,
            uls_up=cfg.uls_feature in UP_FEATURES,
        )
        if cfg.level != "channel":
            det.normalizer_c = _fit_normalizer_constant(cfg, level_pool, rng)
        return det
    if cfg.system == "ssls":
        X, y = _detector_training_set(detector_pool, False, cfg.detector_cap_per_subject, rng)
        model = shallow.fit(cfg.shallow_kind, X, y, seed=seed)
        return _FittedDetector(kind="shallow", shallow_model=model)
    X, y = _detector_training_set(detector_pool, True, cfg.detector_cap_per_subject, rng)
    train_cfg = replace(cfg.train, seed=seed)
    model = cnn_mod.train(X, y, cfg.arch, train_cfg)
    return _FittedDetector(kind="cnn", cnn_model=model)


def _fit_normalizer_constant(
    cfg: SystemConfig, level_pool: list[SubjectData], rng: np.random.Generator
) -> float:
    """mean + 3*std of the feature pooled over windows of slow-free
    training recordings (up to normalizer_max_recordings, randomly drawn)."""
    col = FEATURE_NAMES.index(cfg.uls_feature)
    slow_free = [s for s in level_pool if s.eeg_label == 0]
    if not slow_free:
        raise ModelError("no slow-free recordings to fit the ULS normalizer")
    if len(slow_free) > cfg.normalizer_max_recordings:
        chosen = rng.choice(len(slow_free), size=cfg.normalizer_max_recordings, replace=False)
        slow_free = [slow_free[i] for i in chosen]
    values = np.concatenate([s.features8[:, col] for s in slow_free])
    c = float(values.mean() + 3.0 * values.std())
    if c <= 0:
        raise ModelError("degenerate normalizer constant")
    return c


# -- level assembly -----------------------------------------------------------


def _subject_histogram_features(
    cfg: SystemConfig, det: _FittedDetector, subject: SubjectData
) -> np.ndarray:
    values = det.histogram_values(subject)
    hist = build_histogram(values, cfg.n_bins, det.histogram_mode)
    return histogram_features(values, hist).vector()


def _segment_feature_rows(
    cfg: SystemConfig, det: _FittedDetector, subject: SubjectData
) -> np.ndarray:
    values = det.histogram_values(subject).reshape(subject.n_segments, subject.n_channels)
    rows = np.empty((subject.n_segments, cfg.n_bins + 9 + (2 if det.histogram_mode == "uls" else 0)))
    for i in range(subject.n_segments):
        hist = build_histogram(values[i], cfg.n_bins, det.histogram_mode)
        rows[i] = histogram_features(values[i], hist).vector()
    return rows


@dataclass
class FittedSystem:
    cfg: SystemConfig
    detector: _FittedDetector
    classifier: shallow.ShallowModel | None

    def predict(self, subject: SubjectData) -> tuple[np.ndarray, np.ndarray]:
        """Scores and ground-truth labels at the configured level."""
        if self.cfg.level == "channel":
            if subject.window_labels is None:
                raise ModelError("subject lacks channel-level labels")
            return self.detector.scores(subject), subject.window_labels.astype(np.int64)
        if self.cfg.level == "segment":
            if subject.segment_labels is None:
                raise ModelError("subject lacks segment-level labels")
            rows = _segment_feature_rows(self.cfg, self.detector, subject)
            return self.classifier.predict_score(rows), subject.segment_labels.astype(np.int64)
        if subject.eeg_label is None:
            raise ModelError("subject lacks an EEG-level label")
        row = _subject_histogram_features(self.cfg, self.detector, subject)
        return (
            self.classifier.predict_score(row[None, :]),
            np.array([subject.eeg_label], dtype=np.int64),
        )


@dataclass
class SlowingSystem:
    """eval-protocol system: fit(detector_pool, level_pool, seed)."""

    cfg: SystemConfig

    def fit(
        self,
        detector_pool: list[SubjectData],
        level_pool: list[SubjectData],
        seed: int = 0,
    ) -> FittedSystem:
        det = _fit_detector(self.cfg, detector_pool, level_pool, seed)
        classifier = None
        if self.cfg.level == "segment":
            rows, labels = [], []
            for subject in level_pool:
                if subject.segment_labels is None:
                    raise ModelError(f"subject {subject.subject_id} lacks segment labels")
                rows.append(_segment_feature_rows(self.cfg, det, subject))
                labels.append(subject.segment_labels.astype(np.int64))
            classifier = shallow.fit(
                self.cfg.classifier_kind, np.concatenate(rows), np.concatenate(labels), seed=seed
            )
        elif self.cfg.level == "eeg":
            rows = np.vstack([
                _subject_histogram_features(self.cfg, det, s) for s in level_pool
            ])
            labels = np.array([s.eeg_label for s in level_pool], dtype=np.int64)
            if np.any(labels < 0) or any(s.eeg_label is None for s in level_pool):
                raise ModelError("every classifier-pool subject needs an EEG label")
            classifier = shallow.fit(self.cfg.classifier_kind, rows, labels, seed=seed)
        return FittedSystem(self.cfg, det, classifier)
