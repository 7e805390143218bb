"""slowave: detection of pathological slowing in multi-channel scalp EEG.

Three detection systems operating at three granularities:

* channel level -- a 5 s single-channel window is scored for slowing,
* segment level -- a 5 s multi-channel window,
* recording (EEG) level -- a whole recording.

The unsupervised system (ULS) thresholds spectral features, the supervised
shallow system (SSLS) runs a shallow learner on spectral features, and the
supervised deep system (SDLS) runs a small 1D CNN on smoothed spectra.
Segment- and EEG-level decisions are made by shallow learners on
histogram-based aggregations of the per-channel values.
"""

__version__ = "0.1.0"

from .edf import Recording, read_csv, read_edf, write_csv, write_edf
from .errors import (
    ConfigError,
    EdfFormatError,
    FeatureError,
    LeakageError,
    ModelError,
    SlowaveError,
)
from .preprocess import PreprocessConfig, preprocess_recording, segment_recording
from .spectral import (
    BandPowers,
    SpectralFeatures,
    band_powers,
    cnn_spectrum,
    periodogram,
    power_ratios,
    relative_powers,
    spectral_features,
)

__all__ = [
    "BandPowers",
    "ConfigError",
    "EdfFormatError",
    "FeatureError",
    "LeakageError",
    "ModelError",
    "PreprocessConfig",
    "Recording",
    "SlowaveError",
    "SpectralFeatures",
    "band_powers",
    "cnn_spectrum",
    "periodogram",
    "power_ratios",
    "preprocess_recording",
    "read_csv",
    "read_edf",
    "relative_powers",
    "segment_recording",
    "spectral_features",
    "write_csv",
    "write_edf",
]
