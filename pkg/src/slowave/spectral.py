"""Spectral features of 5 s single-channel windows.

A 640-sample window at 128 Hz transforms to a one-sided power spectrum of
321 bins over [0, 64] Hz (0.2 Hz resolution). Band powers over delta
[1,4), theta [4,8), alpha [8,13), and beta [13,30) Hz yield relative
powers (which sum to one) and four power ratios. The deep detector input
is the [0,30) Hz portion (150 bins) smoothed by a length-5 moving average.

All features are scale-invariant: multiplying the window by k > 0 leaves
relative powers and ratios unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FeatureError

WINDOW_SAMPLES = 640
SPECTRUM_BINS = 321
CNN_BINS = 150
FREQ_RESOLUTION_HZ = 0.2

BANDS_HZ = {
    "delta": (1.0, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "beta": (13.0, 30.0),
}

FEATURE_NAMES = ("rp_delta", "rp_theta", "rp_alpha", "rp_beta", "pri", "dar", "tar", "tbar")

# Thresholding direction per feature: slowing raises delta/theta mass and
# the ratios, and depresses alpha/beta mass.
UP_FEATURES = frozenset({"rp_delta", "rp_theta", "pri", "dar", "tar", "tbar"})
DOWN_FEATURES = frozenset({"rp_alpha", "rp_beta"})


@dataclass(frozen=True)
class BandPowers:
    p_delta: float
    p_theta: float
    p_alpha: float
    p_beta: float

    @property
    def p_total(self) -> float:
        return self.p_delta + self.p_theta + self.p_alpha + self.p_beta


@dataclass(frozen=True)
class SpectralFeatures:
    """Relative band powers plus the four power ratios of one window."""

    rp_delta: float
    rp_theta: float
    rp_alpha: float
    rp_beta: float
    pri: float
    dar: float
    tar: float
    tbar: float

    def as_vector(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES])

    def value(self, name: str) -> float:
        if name not in FEATURE_NAMES:
            raise FeatureError(f"unknown spectral feature {name!r}")
        return float(getattr(self, name))


def periodogram(x: np.ndarray, n_samples: int = WINDOW_SAMPLES) -> np.ndarray:
    """One-sided power spectrum of one or more windows (last axis).

    Energy-normalized: the bins sum to the time-domain energy sum(x**2),
    so Parseval's identity holds exactly up to rounding. A 640-sample
    window yields 321 bins over [0, 64] Hz.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != n_samples:
        raise ValueError(f"expected {n_samples}-sample windows, got {x.shape[-1]}")
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2 / n_samples
    if n_samples % 2 == 0:
        spec[..., 1:-1] *= 2.0
    else:
        spec[..., 1:] *= 2.0
    return spec


def spectrum_frequencies(n_samples: int = WINDOW_SAMPLES, fs: float = 128.0) -> np.ndarray:
    return np.fft.rfftfreq(n_samples, 1.0 / fs)


def band_powers(
    spec: np.ndarray, freqs: np.ndarray | None = None, fs: float = 128.0
) -> BandPowers:
    """Sum spectrum bins into the four bands.

    Bands are half-open [lo, hi): a bin sitting exactly on a boundary
    belongs to the upper band.
    """
    spec = np.asarray(spec, dtype=np.float64)
    if freqs is None:
        n_samples = 2 * (spec.shape[-1] - 1)
        freqs = spectrum_frequencies(n_samples, fs)
    if freqs[-1] < 30.0:
        raise ValueError("spectrum must cover at least [0, 30] Hz")
    powers = {}
    for name, (lo, hi) in BANDS_HZ.items():
        mask = (freqs >= lo) & (freqs < hi)
        powers[name] = float(spec[..., mask].sum(axis=-1))
    return BandPowers(
        p_delta=powers["delta"],
        p_theta=powers["theta"],
        p_alpha=powers["alpha"],
        p_beta=powers["beta"],
    )


def relative_powers(bp: BandPowers) -> tuple[float, float, float, float]:
    """Normalize band powers to relative powers summing to one."""
    total = bp.p_total
    if total <= 0:
        raise FeatureError("zero total band power: degenerate all-zero window")
    return (
        bp.p_delta / total,
        bp.p_theta / total,
        bp.p_alpha / total,
        bp.p_beta / total,
    )


def power_ratios(rp: tuple[float, float, float, float]) -> tuple[float, float, float, float]:
    """PRI, DAR, TAR, TBAR from the relative-power quadruple."""
    rp_delta, rp_theta, rp_alpha, rp_beta = rp
    pairs = {
        "pri": rp_alpha + rp_beta,
        "dar": rp_alpha,
        "tar": rp_alpha,
        "tbar": rp_beta + rp_alpha,
    }
    for name, denom in pairs.items():
        if denom <= 0:
            raise FeatureError(f"zero denominator computing {name}")
    return (
        (rp_delta + rp_theta) / (rp_alpha + rp_beta),
        rp_delta / rp_alpha,
        rp_theta / rp_alpha,
        rp_theta / (rp_beta + rp_alpha),
    )


def spectral_features(x: np.ndarray, fs: float = 128.0) -> SpectralFeatures:
    """All eight features of a single 5 s window."""
    spec = periodogram(x)
    rp = relative_powers(band_powers(spec, fs=fs))
    pri, dar, tar, tbar = power_ratios(rp)
    return SpectralFeatures(rp[0], rp[1], rp[2], rp[3], pri, dar, tar, tbar)


def feature_matrix(windows: np.ndarray, fs: float = 128.0) -> np.ndarray:
    """Eight spectral features for a batch of windows [n x 640] -> [n x 8]."""
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    spec = periodogram(windows)
    freqs = spectrum_frequencies(windows.shape[-1], fs)
    bands = np.empty((windows.shape[0], 4))
    for j, (lo, hi) in enumerate(BANDS_HZ.values()):
        mask = (freqs >= lo) & (freqs < hi)
        bands[:, j] = spec[:, mask].sum(axis=1)
    total = bands.sum(axis=1)
    if np.any(total <= 0):
        raise FeatureError("zero total band power in at least one window")
    rp = bands / total[:, None]
    alpha_beta = rp[:, 2] + rp[:, 3]
    if np.any(rp[:, 2] <= 0) or np.any(alpha_beta <= 0):
        raise FeatureError("zero ratio denominator in at least one window")
    out = np.empty((windows.shape[0], 8))
    out[:, 0:4] = rp
    out[:, 4] = (rp[:, 0] + rp[:, 1]) / alpha_beta
    out[:, 5] = rp[:, 0] / rp[:, 2]
    out[:, 6] = rp[:, 1] / rp[:, 2]
    out[:, 7] = rp[:, 1] / alpha_beta
    return out


def cnn_spectrum(x: np.ndarray) -> np.ndarray:
    """Smoothed [0, 30) Hz power spectrum: the deep detector input.

    640 samples -> 321-bin spectrum -> first 150 bins -> centered moving
    average of length 5 with window shrinkage at the edges. Accepts a
    single window or a batch (last axis = samples).
    """
    spec = periodogram(x)[..., :CNN_BINS]
    kernel = np.ones(5)
    counts = np.convolve(np.ones(CNN_BINS), kernel, mode="same")
    if spec.ndim == 1:
        return np.convolve(spec, kernel, mode="same") / counts
    padded = np.pad(spec, [(0, 0)] * (spec.ndim - 1) + [(2, 2)])
    window_sum = np.lib.stride_tricks.sliding_window_view(padded, 5, axis=-1).sum(axis=-1)
    return window_sum / counts
