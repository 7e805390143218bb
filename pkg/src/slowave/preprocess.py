"""Preprocessing chain: notch, high-pass, CAR montage, downsampling to
128 Hz, rms-based artifact rejection, and segmentation into 5 s windows.

All filters are causal (forward-only) Butterworth designs applied per
channel as second-order sections; identical input and config give
bit-identical output.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import signal

from .edf import Recording

logger = logging.getLogger(__name__)

TARGET_FS = 128.0
WINDOW_S = 5.0
WINDOW_OVERLAP = 0.75


@dataclass
class PreprocessConfig:
    """Knobs of the preprocessing chain.

    notch_hz is 50 or 60 depending on the mains frequency at the recording
    site. drop_rejected selects whether windows intersecting rejected
    epochs are dropped at segmentation ("before") or merely flagged on the
    emitted segments ("after").
    """

    notch_hz: float = 50.0
    hp_cutoff_hz: float = 1.0
    target_fs: float = TARGET_FS
    artifact_sigma: float = 3.0
    epoch_s: float = 1.0
    drop_rejected: str = "before"

    def __post_init__(self) -> None:
        if self.notch_hz not in (50.0, 60.0, 50, 60):
            raise ValueError(f"notch_hz must be 50 or 60, got {self.notch_hz}")
        if not 0 < self.hp_cutoff_hz < self.target_fs / 2:
            raise ValueError(
                f"hp_cutoff_hz {self.hp_cutoff_hz} outside (0, {self.target_fs / 2})"
            )
        if self.drop_rejected not in ("before", "after"):
            raise ValueError("drop_rejected must be 'before' or 'after'")


@dataclass
class Segment:
    """One 5 s multi-channel window of a preprocessed recording."""

    data: np.ndarray  # [n_channels x window samples] at target_fs
    start_s: float
    rejected_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


def butterworth_highpass(
    x: np.ndarray, fs: float, cutoff: float, order: int = 4
) -> np.ndarray:
    """Causal 4th-order Butterworth high-pass along the last axis."""
    if not 0 < cutoff < fs / 2:
        raise ValueError(f"cutoff {cutoff} outside (0, {fs / 2})")
    if not 1 <= int(order) <= 8:
        raise ValueError(f"unsupported filter order {order}")
    sos = signal.butter(order, cutoff, btype="highpass", fs=fs, output="sos")
    return signal.sosfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


def butterworth_notch(
    x: np.ndarray, fs: float, f0: float, order: int = 4, bandwidth: float = 2.0
) -> np.ndarray:
    """Causal Butterworth band-stop at f0 +/- bandwidth along the last axis."""
    if not 0 < f0 < fs / 2:
        raise ValueError(f"notch frequency {f0} outside (0, {fs / 2})")
    if not 0 < bandwidth < f0:
        raise ValueError(f"bandwidth {bandwidth} outside (0, {f0})")
    if f0 + bandwidth >= fs / 2:
        raise ValueError(f"notch band edge {f0 + bandwidth} at or above Nyquist")
    if not 1 <= int(order) <= 8:
        raise ValueError(f"unsupported filter order {order}")
    sos = signal.butter(
        order, [f0 - bandwidth, f0 + bandwidth], btype="bandstop", fs=fs, output="sos"
    )
    return signal.sosfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


def car_montage(rec: Recording) -> Recording:
    """Common average reference: subtract the across-channel mean per sample."""
    if rec.n_channels < 2:
        raise ValueError("CAR montage is undefined for a single channel")
    return rec.copy_with(rec.data - rec.data.mean(axis=0, keepdims=True))


def _antialias_fir(fs_in: float, up: int, target_fs: float) -> np.ndarray:
    """Hamming-windowed sinc low-pass for polyphase resampling.

    Designed at the upsampled rate fs_in*up: passband edge 0.45*target_fs,
    stopband edge 0.465*target_fs (about -53 dB), unit DC gain.
    """
    rate_up = fs_in * up
    f_pass = 0.45 * target_fs
    f_stop = 0.465 * target_fs
    fc = 0.5 * (f_pass + f_stop)
    numtaps = int(np.ceil(5.0 * rate_up / (f_stop - f_pass)))
    numtaps += 1 - numtaps % 2
    n = np.arange(numtaps) - (numtaps - 1) / 2
    h = 2 * fc / rate_up * np.sinc(2 * fc / rate_up * n) * np.hamming(numtaps)
    return h / h.sum()


def resample_to(rec: Recording, target_fs: float = TARGET_FS) -> Recording:
    """Anti-alias and resample to target_fs (downsampling only).

    A recording already at target_fs is returned with its data unchanged.
    """
    if rec.fs < target_fs:
        raise ValueError(f"upsampling {rec.fs} -> {target_fs} Hz is unsupported")
    if rec.fs == target_fs:
        return rec.copy_with(rec.data.copy())
    ratio = Fraction(target_fs).limit_denominator(10**6) / Fraction(
        rec.fs
    ).limit_denominator(10**6)
    up, down = ratio.numerator, ratio.denominator
    h = _antialias_fir(rec.fs, up, target_fs)
    data = signal.resample_poly(rec.data, up, down, axis=-1, window=h)
    return rec.copy_with(data, fs=target_fs)


def epoch_rms(rec: Recording, epoch_s: float = 1.0) -> np.ndarray:
    """Root-mean-square amplitude of non-overlapping epochs, per channel."""
    samples = int(round(epoch_s * rec.fs))
    n_epochs = rec.n_samples // samples
    if n_epochs == 0:
        return np.zeros((rec.n_channels, 0))
    x = rec.data[:, : n_epochs * samples].reshape(rec.n_channels, n_epochs, samples)
    return np.sqrt(np.mean(x**2, axis=2))


def reject_artifacts(rec: Recording, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """Flag 1 s epochs whose rms exceeds mean + sigma*std of that channel's
    epoch rms values. Returns a boolean [n_channels x n_epochs] mask."""
    cfg = cfg or PreprocessConfig()
    rms = epoch_rms(rec, cfg.epoch_s)
    if rms.shape[1] == 0:
        return np.zeros((rec.n_channels, 0), dtype=bool)
    mean = rms.mean(axis=1, keepdims=True)
    std = rms.std(axis=1, keepdims=True)
    threshold = mean + cfg.artifact_sigma * std
    # Float guard: equal-rms epochs must never self-reject on ulp noise.
    return rms > threshold * (1 + 1e-9) + 1e-12


def segment_recording(
    rec: Recording,
    win_s: float = WINDOW_S,
    overlap: float = WINDOW_OVERLAP,
    rejected: np.ndarray | None = None,
    epoch_s: float = 1.0,
    drop_rejected: str = "before",
) -> list[Segment]:
    """Cut a recording into win_s windows with the given overlap fraction.

    With drop_rejected="before", any window intersecting a rejected epoch on
    any channel is dropped; with "after" it is kept and flagged via the
    segment's rejected_mask.
    """
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap {overlap} outside [0, 1)")
    duration = rec.duration_s
    if duration < win_s:
        raise ValueError(f"recording of {duration:.2f}s is shorter than one window")
    hop = win_s * (1 - overlap)
    n_windows = int(np.floor((duration - win_s) / hop + 1e-9)) + 1
    win_samples = int(round(win_s * rec.fs))

    epoch_flags = None
    if rejected is not None and rejected.size:
        epoch_flags = np.asarray(rejected, dtype=bool).any(axis=0)

    segments: list[Segment] = []
    for k in range(n_windows):
        start_s = k * hop
        i0 = int(round(start_s * rec.fs))
        if i0 + win_samples > rec.n_samples:
            break
        flags = np.zeros(0, dtype=bool)
        if epoch_flags is not None:
            e0 = int(np.floor(start_s / epoch_s + 1e-9))
            e1 = int(np.ceil((start_s + win_s) / epoch_s - 1e-9))
            flags = epoch_flags[e0 : min(e1, epoch_flags.size)]
            if drop_rejected == "before" and flags.any():
                continue
        segments.append(
            Segment(
                data=rec.data[:, i0 : i0 + win_samples],
                start_s=start_s,
                rejected_mask=flags,
            )
        )
    return segments


def preprocess_recording(
    rec: Recording, cfg: PreprocessConfig | None = None
) -> tuple[Recording, np.ndarray]:
    """Full chain: notch -> high-pass -> CAR -> resample -> artifact mask.

    Returns the preprocessed recording at cfg.target_fs and the boolean
    rejection mask over 1 s epochs of the resampled signal.
    """
    cfg = cfg or PreprocessConfig()
    data = butterworth_notch(rec.data, rec.fs, float(cfg.notch_hz))
    data = butterworth_highpass(data, rec.fs, cfg.hp_cutoff_hz)
    filtered = rec.copy_with(data)
    referenced = car_montage(filtered) if rec.n_channels >= 2 else filtered
    resampled = resample_to(referenced, cfg.target_fs)
    mask = reject_artifacts(resampled, cfg)
    return resampled, mask
