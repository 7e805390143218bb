"""Assembly of the three detection systems.

Channel-level detectors (feature threshold, shallow learner, CNN) score 5 s
single-channel windows. Segment- and EEG-level decisions aggregate the
per-channel values into histograms: detector scores over [0, 1], or
normalized spectral features over [0, 4] with two outlier bins. Histogram
counts plus nine summary statistics feed a shallow classifier.

Also here: the normal/slow-percentage threshold rule for whole recordings,
the four degrees of slowing (generalized/focal x persistent/intermittent),
and the stratified sampling of segments for expert annotation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cnn import CnnModel
from .edf import Recording
from .errors import FeatureError, ModelError
from .preprocess import WINDOW_OVERLAP, WINDOW_S, Segment, segment_recording
from .shallow import ShallowModel
from .spectral import (
    DOWN_FEATURES,
    FEATURE_NAMES,
    UP_FEATURES,
    SpectralFeatures,
    cnn_spectrum,
    feature_matrix,
)

logger = logging.getLogger(__name__)

HISTOGRAM_BIN_CHOICES = (2, 5, 10, 15, 20)
ULS_CORE_RANGE = (0.0, 4.0)
ULS_OUTLIER_RANGE = (-100.0, 100.0)
STAT_NAMES = ("mean", "median", "mode", "std", "min", "max", "range", "kurtosis", "skewness")

# Normal-background / slowing percentage thresholds selected in the source
# study's 20-bin analysis (mean-BAC-optimal per system).
TABLE_THRESHOLDS = {
    "uls": {"normal": 55.0, "slow": 10.0},
    "ssls": {"normal": 80.0, "slow": 5.0},
    "sdls": {"normal": 90.0, "slow": 5.0},
}

DEGREE_FLAG_FRACTION = 0.20
DEGREE_PERSISTENT_FRACTION = 0.50
DEGREE_GENERALIZED_FRACTION = 0.50
SLOW_SCORE_CUTOFF = 0.5


def uls_channel_score(feat: SpectralFeatures, feature: str, theta: float) -> int:
    """Threshold rule: 1 = slowing. Up-features fire above the threshold,
    alpha/beta relative power fire below it; equality is no detection."""
    value = feat.value(feature)
    if feature in UP_FEATURES:
        return int(value > theta)
    if feature in DOWN_FEATURES:
        return int(value < theta)
    raise FeatureError(f"unknown spectral feature {feature!r}")


@dataclass(frozen=True)
class UlsNormalizer:
    """Division constant for a spectral feature: the value at mean + 3 std
    of the feature pooled over windows of slow-free recordings."""

    feature: str
    c: float

    def __post_init__(self) -> None:
        if self.feature not in FEATURE_NAMES:
            raise FeatureError(f"unknown spectral feature {self.feature!r}")
        if not self.c > 0:
            raise ValueError(f"normalizer constant must be positive, got {self.c}")

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) / self.c


def fit_uls_normalizer(
    slow_free: list[Recording],
    feature: str,
    win_s: float = WINDOW_S,
    overlap: float = WINDOW_OVERLAP,
    expected_n: int = 50,
) -> UlsNormalizer:
    """Pool the feature over every 5 s window of every channel of the given
    slow-free recordings; c = mean + 3*std of the pool."""
    if feature not in FEATURE_NAMES:
        raise FeatureError(f"unknown spectral feature {feature!r}")
    if not slow_free:
        raise ValueError("need at least one slow-free recording")
    if len(slow_free) < expected_n:
        logger.warning(
            "normalizer fitted on %d recordings (recommended: %d)",
            len(slow_free), expected_n,
        )
    col = FEATURE_NAMES.index(feature)
    pooled = []
    for rec in slow_free:
        segs = segment_recording(rec, win_s, overlap)
        windows = np.concatenate([s.data for s in segs], axis=0)
        pooled.append(feature_matrix(windows)[:, col])
    values = np.concatenate(pooled)
    if values.size == 0:
        raise ValueError("empty feature pool")
    c = float(values.mean() + 3.0 * values.std())
    return UlsNormalizer(feature=feature, c=c)


@dataclass
class SlowHistogram:
    """Counts over fixed bins; 'unit' mode covers [0, 1] with B bins,
    'uls' mode covers [0, 4] with B core bins plus outlier bins
    [-100, 0) and (4, 100]."""

    mode: str
    n_core_bins: int
    counts: np.ndarray
    core_edges: np.ndarray

    @property
    def n_values(self) -> int:
        return int(self.counts.sum())

    def frequencies(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / total

    def bin_centers(self) -> np.ndarray:
        core = 0.5 * (self.core_edges[:-1] + self.core_edges[1:])
        if self.mode == "unit":
            return core
        lo = 0.5 * (ULS_OUTLIER_RANGE[0] + ULS_CORE_RANGE[0])
        hi = 0.5 * (ULS_CORE_RANGE[1] + ULS_OUTLIER_RANGE[1])
        return np.concatenate([[lo], core, [hi]])

    def core_counts(self) -> np.ndarray:
        return self.counts if self.mode == "unit" else self.counts[1:-1]


def build_histogram(values: np.ndarray, n_bins: int, mode: str = "unit") -> SlowHistogram:
    """Histogram detector scores ('unit') or normalized features ('uls')."""
    if n_bins not in HISTOGRAM_BIN_CHOICES:
        raise ValueError(f"n_bins must be one of {HISTOGRAM_BIN_CHOICES}, got {n_bins}")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if mode == "unit":
        if values.size and (values.min() < -1e-9 or values.max() > 1 + 1e-9):
            raise ValueError("detector scores outside [0, 1]")
        clipped = np.clip(values, 0.0, 1.0)
        counts, edges = np.histogram(clipped, bins=n_bins, range=(0.0, 1.0))
        return SlowHistogram("unit", n_bins, counts, edges)
    if mode != "uls":
        raise ValueError(f"unknown histogram mode {mode!r}")
    lo_lim, hi_lim = ULS_OUTLIER_RANGE
    if values.size and (values.min() < lo_lim or values.max() > hi_lim):
        logger.warning("values outside [%g, %g] clamped into the outlier bins", lo_lim, hi_lim)
        values = np.clip(values, lo_lim, hi_lim)
    core_lo, core_hi = ULS_CORE_RANGE
    below = int(np.sum(values < core_lo))
    above = int(np.sum(values > core_hi))
    core = values[(values >= core_lo) & (values <= core_hi)]
    core_counts, edges = np.histogram(core, bins=n_bins, range=ULS_CORE_RANGE)
    counts = np.concatenate([[below], core_counts, [above]])
    return SlowHistogram("uls", n_bins, counts, edges)


@dataclass
class HistogramFeatures:
    """Normalized histogram counts plus nine statistics of the raw values."""

    frequencies: np.ndarray
    stats: dict[str, float]
    mode: str
    n_core_bins: int

    def vector(self) -> np.ndarray:
        return np.concatenate([self.frequencies, [self.stats[k] for k in STAT_NAMES]])

    def names(self) -> list[str]:
        return [f"bin_{i}" for i in range(len(self.frequencies))] + list(STAT_NAMES)


def histogram_features(values: np.ndarray, hist: SlowHistogram) -> HistogramFeatures:
    """The nine statistics run over the raw values; the mode statistic is
    the center of the most populated bin (ties to the lower bin)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ValueError("need at least one value")
    std = float(values.std())
    if std <= 1e-12 * max(1.0, abs(float(values.mean()))):
        std = 0.0  # constant input up to rounding
    if std > 0:
        z = (values - values.mean()) / std
        skewness = float(np.mean(z**3))
        kurtosis = float(np.mean(z**4) - 3.0)
    else:
        skewness = 0.0
        kurtosis = 0.0
    centers = hist.bin_centers()
    stats = {
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "mode": float(centers[int(np.argmax(hist.counts))]),
        "std": std,
        "min": float(values.min()),
        "max": float(values.max()),
        "range": float(values.max() - values.min()),
        "kurtosis": kurtosis,
        "skewness": skewness,
    }
    return HistogramFeatures(hist.frequencies(), stats, hist.mode, hist.n_core_bins)


# ---------------------------------------------------------------------------
# Channel-level detectors


class ChannelDetector:
    """Shared surface: per-window scores plus histogram-feeding values."""

    histogram_mode: str = "unit"

    def score_windows(self, windows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def histogram_values(self, windows: np.ndarray) -> np.ndarray:
        return self.score_windows(windows)


@dataclass
class UlsThresholdDetector(ChannelDetector):
    """Feature threshold emitting {0, 1}; histograms use the normalized
    feature value instead of the binary decision."""

    feature: str = "pri"
    theta: float = 3.5
    normalizer: UlsNormalizer | None = None

    def __post_init__(self) -> None:
        if self.feature not in FEATURE_NAMES:
            raise FeatureError(f"unknown spectral feature {self.feature!r}")
        self.histogram_mode = "uls"

    def _raw_values(self, windows: np.ndarray) -> np.ndarray:
        col = FEATURE_NAMES.index(self.feature)
        return feature_matrix(windows)[:, col]

    def score_windows(self, windows: np.ndarray) -> np.ndarray:
        raw = self._raw_values(windows)
        if self.feature in UP_FEATURES:
            return (raw > self.theta).astype(np.float64)
        return (raw < self.theta).astype(np.float64)

    def histogram_values(self, windows: np.ndarray) -> np.ndarray:
        if self.normalizer is None:
            raise ModelError("ULS histograms need a fitted normalizer")
        if self.normalizer.feature != self.feature:
            raise ModelError(
                f"normalizer fitted for {self.normalizer.feature!r}, "
                f"detector uses {self.feature!r}"
            )
        return self.normalizer.normalize(self._raw_values(windows))


@dataclass
class ShallowDetector(ChannelDetector):
    """Shallow learner over the eight spectral features of a window."""

    model: ShallowModel

    def score_windows(self, windows: np.ndarray) -> np.ndarray:
        return self.model.predict_score(feature_matrix(windows))


@dataclass
class CnnDetector(ChannelDetector):
    """CNN over the 150-bin smoothed spectrum of a window."""

    model: CnnModel

    def score_windows(self, windows: np.ndarray) -> np.ndarray:
        return self.model.predict_scores(cnn_spectrum(windows))


# ---------------------------------------------------------------------------
# Segment- and EEG-level feature extraction


def segment_level_features(seg: Segment, det: ChannelDetector, n_bins: int) -> HistogramFeatures:
    """One histogram over the per-channel values of a 5 s segment."""
    values = det.histogram_values(seg.data)
    hist = build_histogram(values, n_bins, det.histogram_mode)
    return histogram_features(values, hist)


def eeg_level_values(
    rec: Recording,
    det: ChannelDetector,
    rejected: np.ndarray | None = None,
    win_s: float = WINDOW_S,
    overlap: float = WINDOW_OVERLAP,
) -> np.ndarray:
    """Channel-window values over all 5 s / 75 % overlap windows."""
    segs = segment_recording(rec, win_s, overlap, rejected=rejected)
    if not segs:
        raise ValueError("no usable segments after artifact rejection")
    windows = np.concatenate([s.data for s in segs], axis=0)
    return det.histogram_values(windows)


def eeg_level_features(
    rec: Recording,
    det: ChannelDetector,
    n_bins: int,
    rejected: np.ndarray | None = None,
) -> HistogramFeatures:
    values = eeg_level_values(rec, det, rejected)
    hist = build_histogram(values, n_bins, det.histogram_mode)
    return histogram_features(values, hist)


def fit_segment_or_eeg_classifier(
    features: list[HistogramFeatures],
    labels: np.ndarray,
    kind: str = "lr",
    seed: int = 0,
) -> ShallowModel:
    """Shallow learner on stacked histogram feature vectors."""
    from . import shallow

    X = np.vstack([f.vector() for f in features])
    return shallow.fit(kind, X, np.asarray(labels, dtype=np.int64), seed=seed)


# ---------------------------------------------------------------------------
# Threshold-based whole-recording classification


@dataclass(frozen=True)
class ThresholdDecision:
    label: int  # 1 = slowing
    normal_pct: float
    slow_pct: float
    middle_pct: float


def threshold_classify_eeg(hist: SlowHistogram, mode: str, theta_pct: float) -> ThresholdDecision:
    """Classify a recording from its 20-bin histogram.

    Normal background lives in bins 1-5, slowing in bins 15-20 (1-indexed
    over the core bins; outlier bins are excluded). In 'normal' mode the
    recording is slowing when the normal percentage is below the threshold;
    in 'slow' mode when the slowing percentage is above it.
    """
    if hist.n_core_bins != 20:
        raise ValueError(f"threshold rule needs 20 core bins, got {hist.n_core_bins}")
    if mode not in ("normal", "slow"):
        raise ValueError(f"mode must be 'normal' or 'slow', got {mode!r}")
    core = hist.core_counts().astype(np.float64)
    total = core.sum()
    if total == 0:
        raise ValueError("empty histogram")
    normal_pct = 100.0 * core[0:5].sum() / total
    slow_pct = 100.0 * core[14:20].sum() / total
    middle_pct = 100.0 * core[5:14].sum() / total
    if mode == "normal":
        label = int(normal_pct < theta_pct)
    else:
        label = int(slow_pct > theta_pct)
    return ThresholdDecision(label, normal_pct, slow_pct, middle_pct)


# ---------------------------------------------------------------------------
# Degrees of slowing


DEGREE_CATEGORIES = ("GPS", "GIS", "FPS", "FIS", "slow-free")


@dataclass
class SlowingDegreeReport:
    """Per-channel slow-window fractions and the derived category."""

    channel_fractions: dict[str, float]
    flagged: list[str]
    category: str
    cutoff: float = SLOW_SCORE_CUTOFF

    def to_json_dict(self) -> dict:
        return {
            "category": self.category,
            "flagged_channels": list(self.flagged),
            "channel_fractions": {k: float(v) for k, v in self.channel_fractions.items()},
            "score_cutoff": self.cutoff,
        }

    def scalp_csv(self) -> str:
        lines = ["channel,slow_fraction,flagged"]
        for name, frac in self.channel_fractions.items():
            lines.append(f"{name},{frac:.6f},{int(name in self.flagged)}")
        return "\n".join(lines) + "\n"


def categorize_fractions(fractions: dict[str, float]) -> tuple[list[str], str]:
    """Apply the degree rules to per-channel slow fractions.

    A channel is flagged when its fraction exceeds 20 %. No flagged channel
    means slow-free. Slowing is generalized when flagged channels exceed
    half the montage, focal otherwise; persistent when the mean fraction
    over flagged channels exceeds 50 %, intermittent otherwise. All
    comparisons are strict.
    """
    flagged = [ch for ch, f in fractions.items() if f > DEGREE_FLAG_FRACTION]
    if not flagged:
        return [], "slow-free"
    generalized = len(flagged) > DEGREE_GENERALIZED_FRACTION * len(fractions)
    mean_flagged = float(np.mean([fractions[ch] for ch in flagged]))
    persistent = mean_flagged > DEGREE_PERSISTENT_FRACTION
    category = ("G" if generalized else "F") + ("P" if persistent else "I") + "S"
    return flagged, category


def degrees_of_slowing(
    rec: Recording,
    det: ChannelDetector,
    cutoff: float = SLOW_SCORE_CUTOFF,
    rejected: np.ndarray | None = None,
) -> SlowingDegreeReport:
    """Score every channel-window, flag channels slow in > 20 % of their
    windows, and categorize the recording."""
    segs = segment_recording(rec, WINDOW_S, WINDOW_OVERLAP, rejected=rejected)
    if not segs:
        raise ValueError("no usable segments after artifact rejection")
    n_ch = rec.n_channels
    windows = np.concatenate([s.data for s in segs], axis=0)  # [n_seg*n_ch, 640]
    scores = det.score_windows(windows).reshape(len(segs), n_ch)
    fractions = {
        rec.channels[i]: float(np.mean(scores[:, i] > cutoff)) for i in range(n_ch)
    }
    flagged, category = categorize_fractions(fractions)
    return SlowingDegreeReport(fractions, flagged, category, cutoff)


# ---------------------------------------------------------------------------
# Annotation-segment sampling


@dataclass
class AnnotationSegment:
    """One 5 s multi-channel segment picked for expert annotation."""

    recording_id: str
    start_s: float
    mean_pri: float
    stratum: str  # "high" (PRI > 3.5) or "mid" (1 < PRI < 3.5)
    duplicate_of: int | None = None  # index of the original in the output list


PRI_HIGH_CUTOFF = 3.5
PRI_MID_CUTOFF = 1.0
ANNOTATION_HIGH_FRACTION = 0.9


def select_annotation_segments(
    recs: list[Recording],
    n_segments: int = 950,
    n_duplicates: int = 50,
    seed: int = 0,
    max_per_recording: int = 20,
    win_s: float = WINDOW_S,
    overlap: float = WINDOW_OVERLAP,
) -> list[AnnotationSegment]:
    """Randomized stratified pick of segments for annotation.

    90 % of the unique segments have mean PRI above 3.5, 10 % lie in
    (1, 3.5); at most max_per_recording segments come from one recording.
    n_duplicates copies of randomly chosen picks are appended and the whole
    order is shuffled. Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    high_pool: list[AnnotationSegment] = []
    mid_pool: list[AnnotationSegment] = []
    for idx, rec in enumerate(recs):
        rec_id = rec.meta.get("subject_id", f"rec{idx}")
        segs = segment_recording(rec, win_s, overlap)
        windows = np.concatenate([s.data for s in segs], axis=0)
        pri = feature_matrix(windows)[:, FEATURE_NAMES.index("pri")]
        per_segment = pri.reshape(len(segs), rec.n_channels).mean(axis=1)
        for seg, value in zip(segs, per_segment):
            item = AnnotationSegment(rec_id, seg.start_s, float(value), "")
            if value > PRI_HIGH_CUTOFF:
                item.stratum = "high"
                high_pool.append(item)
            elif PRI_MID_CUTOFF < value < PRI_HIGH_CUTOFF:
                item.stratum = "mid"
                mid_pool.append(item)

    n_high = int(round(ANNOTATION_HIGH_FRACTION * n_segments))
    n_mid = n_segments - n_high
    per_rec_counts: dict[str, int] = {}
    selected: list[AnnotationSegment] = []

    def take(pool: list[AnnotationSegment], quota: int) -> int:
        taken = 0
        order = rng.permutation(len(pool))
        for j in order:
            if taken >= quota:
                break
            item = pool[j]
            if per_rec_counts.get(item.recording_id, 0) >= max_per_recording:
                continue
            per_rec_counts[item.recording_id] = per_rec_counts.get(item.recording_id, 0) + 1
            selected.append(item)
            taken += 1
        return taken

    got_high = take(high_pool, n_high)
    got_mid = take(mid_pool, n_mid)
    if got_high < n_high or got_mid < n_mid:
        logger.warning(
            "annotation pool short: %d/%d high, %d/%d mid segments",
            got_high, n_high, got_mid, n_mid,
        )

    out = list(selected)
    n_dup = min(n_duplicates, len(selected))
    if n_dup < n_duplicates:
        logger.warning("only %d segments available for %d duplicates", n_dup, n_duplicates)
    dup_idx = rng.choice(len(selected), size=n_dup, replace=False)
    for j in dup_idx:
        src = selected[j]
        out.append(
            AnnotationSegment(src.recording_id, src.start_s, src.mean_pri, src.stratum, int(j))
        )
    order = rng.permutation(len(out))
    final = [out[j] for j in order]
    # duplicate_of indices must survive the shuffle: remap to new positions.
    new_pos = {int(old): new for new, old in enumerate(order)}
    for item in final:
        if item.duplicate_of is not None:
            item.duplicate_of = new_pos[item.duplicate_of]
    return final
