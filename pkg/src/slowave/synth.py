"""Synthetic multi-site EEG cohorts with exact ground truth.

Background activity is 1/f^a noise plus a posterior-weighted alpha rhythm
and white sensor noise. Slowing events are raised-cosine-windowed
sinusoids at frequencies drawn from the delta or theta band, scheduled on
a per-channel basis to hit a coverage target. Ground truth (per-channel
window flags, segment labels, recording label, degree category) derives
from the injected-event log, never from re-estimation.

A site-level "delta boost" adds low-frequency colored noise to every
channel, mimicking recording conditions that inflate delta power without
changing the labels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sp_signal

from .detect import categorize_fractions
from .edf import Recording, write_edf
from .errors import ConfigError
from .preprocess import WINDOW_OVERLAP, WINDOW_S

logger = logging.getLogger(__name__)

CHANNELS_1020 = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
    "C4", "T4", "T5", "P3", "Pz", "P4", "T6", "O1", "O2",
)

# Alpha rhythm dominates posterior electrodes.
_ALPHA_WEIGHTS = {
    "O1": 1.0, "O2": 1.0, "T5": 0.7, "T6": 0.7, "P3": 0.7, "Pz": 0.7, "P4": 0.7,
}
ALPHA_WEIGHT_DEFAULT = 0.3

SLOW_BANDS = {"delta": (1.2, 3.7), "theta": (4.3, 7.7)}
SLOW_FREE_FLOOR = 0.11  # coverage above this on any channel makes the EEG "slowing"


@dataclass
class SlowingSpec:
    """How slowing events are injected."""

    band: str = "delta"
    amplitude: float = 22.0
    burst_duration_s: tuple[float, float] = (3.0, 10.0)
    coverage_slowing: tuple[float, float] = (0.25, 0.70)
    coverage_slow_free: tuple[float, float] = (0.0, 0.06)
    generalized_fraction: float = 0.5
    focal_channels: tuple[int, int] = (3, 6)

    def __post_init__(self) -> None:
        if self.band not in SLOW_BANDS:
            raise ConfigError(f"slowing band must be one of {sorted(SLOW_BANDS)}")
        if self.amplitude < 0:
            raise ConfigError("slowing amplitude must be >= 0")
        for lo, hi in (self.burst_duration_s, self.coverage_slowing, self.coverage_slow_free):
            if not 0 <= lo <= hi:
                raise ConfigError("ranges must satisfy 0 <= lo <= hi")
        if self.coverage_slowing[1] > 0.95:
            raise ConfigError("coverage target above 0.95 is not schedulable")


@dataclass
class SynthConfig:
    """One site's cohort recipe."""

    site: str = "siteA"
    n_subjects: int = 40
    duration_s: float = 300.0
    fs: float = 128.0
    one_over_f_exponent: float = 1.0
    background_amplitude: float = 12.0
    alpha_amplitude: float = 8.0
    alpha_freq_hz: float = 10.0
    noise_amplitude: float = 3.0
    delta_boost: float = 1.0
    slowing_fraction: float = 0.5
    slowing: SlowingSpec = field(default_factory=SlowingSpec)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if self.duration_s < WINDOW_S:
            raise ConfigError(f"duration must cover one {WINDOW_S} s window")
        if self.fs <= 0:
            raise ConfigError("fs must be positive")
        if self.delta_boost < 1.0:
            raise ConfigError("delta_boost is a factor >= 1")
        if not 0.0 <= self.slowing_fraction <= 1.0:
            raise ConfigError("slowing_fraction must be in [0, 1]")


@dataclass
class SlowEvent:
    channel: int
    start_s: float
    end_s: float
    freq_hz: float


@dataclass
class GroundTruth:
    """Labels derived from the injected-event log."""

    events: list[SlowEvent]
    channel_coverage: np.ndarray  # [n_channels] fraction of recording
    window_flags: np.ndarray  # [n_windows x n_channels] bool
    segment_labels: np.ndarray  # [n_windows] bool (any-channel rule)
    eeg_label: int
    degree_category: str

    def to_json_dict(self) -> dict:
        return {
            "eeg_label": int(self.eeg_label),
            "degree_category": self.degree_category,
            "channel_coverage": self.channel_coverage.tolist(),
            "segment_labels": self.segment_labels.astype(int).tolist(),
            "window_flags": self.window_flags.astype(int).tolist(),
            "events": [
                {"channel": e.channel, "start_s": e.start_s, "end_s": e.end_s, "freq_hz": e.freq_hz}
                for e in self.events
            ],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "GroundTruth":
        return cls(
            events=[SlowEvent(d["channel"], d["start_s"], d["end_s"], d["freq_hz"])
                    for d in doc["events"]],
            channel_coverage=np.asarray(doc["channel_coverage"], dtype=np.float64),
            window_flags=np.asarray(doc["window_flags"], dtype=bool),
            segment_labels=np.asarray(doc["segment_labels"], dtype=bool),
            eeg_label=int(doc["eeg_label"]),
            degree_category=doc["degree_category"],
        )


def window_grid(duration_s: float, win_s: float = WINDOW_S, overlap: float = WINDOW_OVERLAP):
    hop = win_s * (1 - overlap)
    n = int(np.floor((duration_s - win_s) / hop + 1e-9)) + 1
    return np.arange(n) * hop


def _one_over_f_noise(rng: np.random.Generator, n: int, fs: float, exponent: float) -> np.ndarray:
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    shaping = 1.0 / np.maximum(freqs, 0.5) ** (exponent / 2.0)
    shaping[0] = 0.0  # no DC
    x = np.fft.irfft(spectrum * shaping, n)
    std = x.std()
    return x / std if std > 0 else x


def _schedule_bursts(
    rng: np.random.Generator,
    duration_s: float,
    target_coverage: float,
    dur_range: tuple[float, float],
) -> list[tuple[float, float]]:
    """Non-overlapping intervals whose total length approximates
    target_coverage * duration."""
    if target_coverage <= 0:
        return []
    intervals: list[tuple[float, float]] = []
    covered = 0.0
    dur_mean = 0.5 * (dur_range[0] + dur_range[1])
    gap_mean = max(0.5, dur_mean * (1.0 / target_coverage - 1.0))
    t = rng.uniform(0.0, gap_mean)
    while t < duration_s - dur_range[0]:
        if covered / duration_s >= target_coverage:
            break
        dur = min(rng.uniform(*dur_range), duration_s - t)
        intervals.append((t, t + dur))
        covered += dur
        t += dur + rng.uniform(0.5, 1.5) * gap_mean
    return intervals


def _coverage_profile(
    rng: np.random.Generator, cfg: SynthConfig, is_slowing: bool
) -> np.ndarray:
    """Per-channel coverage targets for one subject."""
    spec = cfg.slowing
    n_ch = len(CHANNELS_1020)
    targets = np.zeros(n_ch)
    if is_slowing:
        peak = rng.uniform(*spec.coverage_slowing)
        if rng.uniform() < spec.generalized_fraction:
            targets[:] = peak * rng.uniform(0.75, 1.0, size=n_ch)
        else:
            count = int(rng.integers(spec.focal_channels[0], spec.focal_channels[1] + 1))
            chosen = rng.choice(n_ch, size=count, replace=False)
            targets[chosen] = peak * rng.uniform(0.75, 1.0, size=count)
    else:
        lo, hi = spec.coverage_slow_free
        if hi > 0:
            count = int(rng.integers(0, 4))
            if count:
                chosen = rng.choice(n_ch, size=count, replace=False)
                targets[chosen] = rng.uniform(lo, hi, size=count)
    return targets


def _ground_truth_from_events(
    events: list[SlowEvent], duration_s: float, n_channels: int
) -> GroundTruth:
    coverage = np.zeros(n_channels)
    for e in events:
        coverage[e.channel] += (e.end_s - e.start_s) / duration_s
    coverage = np.clip(coverage, 0.0, 1.0)
    starts = window_grid(duration_s)
    # A channel-window is slow when events cover at least half the window.
    flags = np.zeros((starts.size, n_channels), dtype=bool)
    for ch in range(n_channels):
        intervals = [(e.start_s, e.end_s) for e in events if e.channel == ch]
        if not intervals:
            continue
        for w, t0 in enumerate(starts):
            t1 = t0 + WINDOW_S
            covered = sum(max(0.0, min(e, t1) - max(s, t0)) for s, e in intervals)
            if covered >= 0.5 * WINDOW_S:
                flags[w, ch] = True
    segment_labels = flags.any(axis=1)
    eeg_label = int(np.any(coverage > SLOW_FREE_FLOOR))
    fractions = {CHANNELS_1020[i]: float(coverage[i]) for i in range(n_channels)}
    if eeg_label:
        _, category = categorize_fractions(fractions)
    else:
        category = "slow-free"
    return GroundTruth(events, coverage, flags, segment_labels, eeg_label, category)


def generate_subject(
    cfg: SynthConfig,
    subject_index: int,
    seed_seq: np.random.SeedSequence,
    is_slowing: bool,
) -> tuple[Recording, GroundTruth]:
    rng = np.random.default_rng(seed_seq)
    n_ch = len(CHANNELS_1020)
    n = int(round(cfg.duration_s * cfg.fs))
    t = np.arange(n) / cfg.fs

    data = np.empty((n_ch, n))
    for i, name in enumerate(CHANNELS_1020):
        background = cfg.background_amplitude * _one_over_f_noise(
            rng, n, cfg.fs, cfg.one_over_f_exponent
        )
        weight = _ALPHA_WEIGHTS.get(name, ALPHA_WEIGHT_DEFAULT)
        am = 0.75 + 0.25 * np.sin(2 * np.pi * 0.05 * t + rng.uniform(0, 2 * np.pi))
        alpha = cfg.alpha_amplitude * weight * am * np.sin(
            2 * np.pi * cfg.alpha_freq_hz * t + rng.uniform(0, 2 * np.pi)
        )
        noise = cfg.noise_amplitude * rng.standard_normal(n)
        data[i] = background + alpha + noise

    events: list[SlowEvent] = []
    if cfg.slowing.amplitude > 0:
        targets = _coverage_profile(rng, cfg, is_slowing)
        band = SLOW_BANDS[cfg.slowing.band]
        for ch in range(n_ch):
            if targets[ch] <= 0:
                continue
            for start, end in _schedule_bursts(
                rng, cfg.duration_s, targets[ch], cfg.slowing.burst_duration_s
            ):
                freq = rng.uniform(*band)
                i0 = int(round(start * cfg.fs))
                i1 = min(int(round(end * cfg.fs)), n)
                seg_t = t[i0:i1] - t[i0]
                envelope = np.sin(np.pi * np.arange(i1 - i0) / max(i1 - i0 - 1, 1)) ** 2
                phase = rng.uniform(0, 2 * np.pi)
                amp = cfg.slowing.amplitude * rng.uniform(0.85, 1.15)
                data[ch, i0:i1] += amp * envelope * np.sin(2 * np.pi * freq * seg_t + phase)
                events.append(SlowEvent(ch, start, i1 / cfg.fs, freq))

    if cfg.delta_boost > 1.0:
        boost_seed = int(rng.integers(0, 2**31 - 1))
        data = _delta_boost_data(data, cfg.fs, cfg.delta_boost, boost_seed)

    rec = Recording(
        channels=list(CHANNELS_1020),
        fs=cfg.fs,
        data=data,
        meta={
            "subject_id": f"{cfg.site}-s{subject_index:03d}",
            "site_id": cfg.site,
        },
    )
    return rec, _ground_truth_from_events(events, cfg.duration_s, n_ch)


def generate_cohort(cfg: SynthConfig) -> list[tuple[Recording, GroundTruth]]:
    """All subjects of one site; bit-identical for identical config+seed.

    Slowing assignment is stratified: exactly round(fraction * n) subjects
    receive injected slowing, in a seed-shuffled order.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_subjects + 1)
    n_slow = int(round(cfg.slowing_fraction * cfg.n_subjects))
    flags = np.zeros(cfg.n_subjects, dtype=bool)
    flags[:n_slow] = True
    np.random.default_rng(children[0]).shuffle(flags)
    return [
        generate_subject(cfg, i, child, is_slowing=bool(flags[i]))
        for i, child in enumerate(children[1:])
    ]


def _delta_boost_data(
    data: np.ndarray, fs: float, factor: float, seed: int
) -> np.ndarray:
    rng = np.random.default_rng(seed)
    sos = sp_signal.butter(4, 4.0, btype="lowpass", fs=fs, output="sos")
    out = data.copy()
    for i in range(data.shape[0]):
        colored = sp_signal.sosfilt(sos, rng.standard_normal(data.shape[1]))
        std = colored.std()
        if std > 0:
            colored /= std
        out[i] += (factor - 1.0) * 0.5 * data[i].std() * colored
    return out


def site_shift(rec: Recording, delta_boost: float, seed: int = 0) -> Recording:
    """Add low-frequency (<= 4 Hz) colored noise scaled by the boost factor.

    Factor 1 returns the recording unchanged. Ground-truth labels are a
    property of the event log and are unaffected.
    """
    if delta_boost < 1.0:
        raise ConfigError("delta_boost is a factor >= 1")
    if delta_boost == 1.0:
        return rec.copy_with(rec.data.copy())
    return rec.copy_with(_delta_boost_data(rec.data, rec.fs, delta_boost, seed))


# ---------------------------------------------------------------------------
# Cohort files


def write_cohort(
    cohort: list[tuple[Recording, GroundTruth]],
    out_dir: str | Path,
    site: str,
    manifest_path: str | Path | None = None,
) -> Path:
    """EDF + ground-truth sidecar JSON per subject, plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec, gt in cohort:
        sid = rec.meta["subject_id"]
        edf_path = out_dir / f"{sid}.edf"
        gt_path = out_dir / f"{sid}.json"
        write_edf(rec, edf_path)
        gt_path.write_text(json.dumps(gt.to_json_dict()))
        entries.append(
            {
                "subject_id": sid,
                "site": rec.meta.get("site_id", site),
                "edf": edf_path.name,
                "ground_truth": gt_path.name,
                "eeg_label": int(gt.eeg_label),
                "degree_category": gt.degree_category,
            }
        )
    manifest = Path(manifest_path) if manifest_path else out_dir / "manifest.json"
    existing = []
    if manifest.exists():
        existing = json.loads(manifest.read_text()).get("subjects", [])
        existing = [e for e in existing if e["site"] != site]
    manifest.write_text(json.dumps({"subjects": existing + entries}, indent=2))
    return manifest


def load_manifest(manifest_path: str | Path) -> list[dict]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ConfigError(f"manifest {manifest_path} does not exist")
    doc = json.loads(manifest_path.read_text())
    return doc["subjects"]
