"""EDF and CSV ingest/export for multi-channel EEG recordings.

Plain EDF only (16-bit little-endian samples, ASCII headers). EDF+
annotations, BDF, and streaming reads are out of scope; ground-truth
labels travel in sidecar JSON files instead of EDF+ TALs.

Layout: a 256-byte main header, then 256 bytes of per-signal header
fields (each field stored for all signals consecutively), then data
records of interleaved int16 samples. Digital values map linearly to
physical values per signal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EdfFormatError

logger = logging.getLogger(__name__)

# Electrode names of the International 10-20 system (19-channel montage,
# including the older T3/T4/T5/T6 and the newer T7/T8/P7/P8 aliases).
TEN_TWENTY_LABELS = frozenset(
    {
        "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8",
        "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz", "P4", "T6",
        "O1", "O2", "T7", "T8", "P7", "P8", "A1", "A2",
    }
)

_MAIN_HEADER_BYTES = 256
_PER_SIGNAL_HEADER_BYTES = 256


@dataclass
class Recording:
    """In-memory multi-channel EEG recording.

    data is [n_channels x n_samples] in microvolts; channel labels are
    unique and ordered to match the rows; fs is the common sampling rate.
    meta carries provenance strings (site id, subject id, start time).
    """

    channels: list[str]
    fs: float
    data: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("data must be a 2-D [n_channels x n_samples] array")
        if len(self.channels) != self.data.shape[0]:
            raise ValueError(
                f"{len(self.channels)} labels for {self.data.shape[0]} data rows"
            )
        if len(self.channels) < 1:
            raise ValueError("a recording needs at least one channel")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channel labels must be unique")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs

    def copy_with(self, data: np.ndarray, fs: float | None = None) -> "Recording":
        """New recording with replaced samples (labels/meta shared semantics)."""
        return Recording(
            channels=list(self.channels),
            fs=self.fs if fs is None else fs,
            data=data,
            meta=dict(self.meta),
        )


def non_1020_channels(channels: list[str]) -> list[str]:
    """Labels not in the 10-20 set (preserved downstream, but flagged)."""
    return [c for c in channels if c not in TEN_TWENTY_LABELS]


@dataclass
class EdfHeader:
    """Parsed EDF header (main + per-signal fields)."""

    version: str
    patient_id: str
    recording_id: str
    start_date: str
    start_time: str
    header_bytes: int
    n_records: int
    record_duration_s: float
    n_signals: int
    labels: list[str]
    transducers: list[str]
    dimensions: list[str]
    physical_min: list[float]
    physical_max: list[float]
    digital_min: list[int]
    digital_max: list[int]
    prefiltering: list[str]
    samples_per_record: list[int]

    def validate(self) -> None:
        expected = _MAIN_HEADER_BYTES * (1 + self.n_signals)
        if self.header_bytes != expected:
            raise EdfFormatError(
                f"header size field {self.header_bytes} != 256*(1+{self.n_signals})"
            )
        if self.n_signals < 1:
            raise EdfFormatError("EDF needs at least one signal")
        if self.n_records < 0:
            raise EdfFormatError(f"negative record count {self.n_records}")
        if self.record_duration_s <= 0:
            raise EdfFormatError(f"record duration {self.record_duration_s} <= 0")
        for i in range(self.n_signals):
            if self.digital_min[i] >= self.digital_max[i]:
                raise EdfFormatError(
                    f"signal {i}: digital min {self.digital_min[i]} >= "
                    f"max {self.digital_max[i]}"
                )
            if self.samples_per_record[i] <= 0:
                raise EdfFormatError(f"signal {i}: samples_per_record <= 0")


def _ascii_field(raw: bytes, start: int, size: int) -> str:
    chunk = raw[start : start + size]
    try:
        return chunk.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise EdfFormatError(f"non-ASCII bytes in header at offset {start}") from exc


def _to_int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise EdfFormatError(f"non-numeric {what} field: {text!r}") from exc


def _to_float(text: str, what: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise EdfFormatError(f"non-numeric {what} field: {text!r}") from exc


def read_header(path: str | Path) -> EdfHeader:
    """Parse and validate the EDF header of a file."""
    path = Path(path)
    with open(path, "rb") as fh:
        main = fh.read(_MAIN_HEADER_BYTES)
        if len(main) < _MAIN_HEADER_BYTES:
            raise EdfFormatError(f"{path}: truncated main header")
        n_signals = _to_int(_ascii_field(main, 252, 4), "n_signals")
        if n_signals < 1:
            raise EdfFormatError(f"{path}: n_signals {n_signals} < 1")
        sig = fh.read(_PER_SIGNAL_HEADER_BYTES * n_signals)
        if len(sig) < _PER_SIGNAL_HEADER_BYTES * n_signals:
            raise EdfFormatError(f"{path}: truncated signal headers")

    def sig_fields(offset: int, size: int) -> list[str]:
        base = offset * n_signals
        return [
            _ascii_field(sig, base + i * size, size) for i in range(n_signals)
        ]

    labels = sig_fields(0, 16)
    transducers = sig_fields(16, 80)
    dimensions = sig_fields(96, 8)
    phys_min = [_to_float(v, "physical min") for v in sig_fields(104, 8)]
    phys_max = [_to_float(v, "physical max") for v in sig_fields(112, 8)]
    dig_min = [_to_int(v, "digital min") for v in sig_fields(120, 8)]
    dig_max = [_to_int(v, "digital max") for v in sig_fields(128, 8)]
    prefiltering = sig_fields(136, 80)
    spr = [_to_int(v, "samples per record") for v in sig_fields(216, 8)]

    header = EdfHeader(
        version=_ascii_field(main, 0, 8),
        patient_id=_ascii_field(main, 8, 80),
        recording_id=_ascii_field(main, 88, 80),
        start_date=_ascii_field(main, 168, 8),
        start_time=_ascii_field(main, 176, 8),
        header_bytes=_to_int(_ascii_field(main, 184, 8), "header bytes"),
        n_records=_to_int(_ascii_field(main, 236, 8), "n_records"),
        record_duration_s=_to_float(_ascii_field(main, 244, 8), "record duration"),
        n_signals=n_signals,
        labels=labels,
        transducers=transducers,
        dimensions=dimensions,
        physical_min=phys_min,
        physical_max=phys_max,
        digital_min=dig_min,
        digital_max=dig_max,
        prefiltering=prefiltering,
        samples_per_record=spr,
    )
    header.validate()
    return header


def read_edf(path: str | Path) -> Recording:
    """Read a plain EDF file into a Recording (samples in physical units).

    Signals must share one sampling rate (samples_per_record / record
    duration); mixed rates are rejected. Digital samples map to physical
    via the per-signal linear map.
    """
    path = Path(path)
    header = read_header(path)
    rates = [n / header.record_duration_s for n in header.samples_per_record]
    if max(rates) - min(rates) > 1e-9:
        raise EdfFormatError(
            f"{path}: mixed sampling rates across signals: {sorted(set(rates))}"
        )
    fs = rates[0]

    samples_per_rec = sum(header.samples_per_record)
    expected = header.n_records * samples_per_rec
    raw = np.fromfile(path, dtype="<i2", offset=header.header_bytes)
    if raw.size < expected:
        raise EdfFormatError(
            f"{path}: truncated data area ({raw.size} of {expected} samples)"
        )
    raw = raw[:expected].reshape(header.n_records, samples_per_rec)

    data = np.empty((header.n_signals, header.n_records * header.samples_per_record[0]))
    col = 0
    for i in range(header.n_signals):
        n = header.samples_per_record[i]
        digital = raw[:, col : col + n].reshape(-1).astype(np.float64)
        col += n
        scale = (header.physical_max[i] - header.physical_min[i]) / (
            header.digital_max[i] - header.digital_min[i]
        )
        data[i] = header.physical_min[i] + (digital - header.digital_min[i]) * scale

    labels = list(header.labels)
    if len(set(labels)) != len(labels):
        # Keep labels unique without dropping data; EDF itself permits dupes.
        seen: dict[str, int] = {}
        for i, lab in enumerate(labels):
            if lab in seen:
                seen[lab] += 1
                labels[i] = f"{lab}-{seen[lab]}"
            else:
                seen[lab] = 0

    meta = {
        "patient_id": header.patient_id,
        "recording_id": header.recording_id,
        "start": f"{header.start_date} {header.start_time}".strip(),
    }
    unknown = non_1020_channels(labels)
    if unknown:
        logger.warning("%s: channels outside the 10-20 set: %s", path, unknown)
        meta["non_1020_channels"] = ",".join(unknown)
    return Recording(channels=labels, fs=fs, data=data, meta=meta)


def _fmt_ascii(value: str, size: int, what: str) -> bytes:
    out = value.encode("ascii", errors="replace")[:size]
    return out.ljust(size, b" ")


def _number_text(value: float, size: int) -> str | None:
    """Shortest ASCII rendering of value that fits in size chars, or None."""
    if float(value).is_integer():
        text = str(int(value))
        return text if len(text) <= size else None
    text = repr(float(value))
    if len(text) <= size:
        return text
    for prec in range(size - 1, 0, -1):
        text = f"{float(value):.{prec}g}"
        if len(text) <= size:
            return text
    return None


def _fmt_number(value: float, size: int, what: str) -> bytes:
    """Format a number into a fixed-width ASCII field."""
    text = _number_text(value, size)
    if text is None:
        raise EdfFormatError(f"{what} value {value!r} does not fit in {size} ASCII chars")
    return text.encode("ascii").ljust(size, b" ")


def _record_layout(n_samples: int, fs: float) -> tuple[int, float, int]:
    """Pick (n_records, record_duration_s, samples_per_record).

    Prefers a single record covering the whole recording; that requires the
    duration to survive the 8-char ASCII field exactly. Falls back to 1 s
    records when fs is integral and divides the sample count.
    """
    duration = n_samples / fs
    text = _number_text(duration, 8)
    if text is not None and float(text) == duration:
        return 1, duration, n_samples
    if float(fs).is_integer() and n_samples % int(fs) == 0:
        return n_samples // int(fs), 1.0, int(fs)
    raise EdfFormatError(
        f"recording length {n_samples} at fs {fs} is not representable in whole "
        "EDF records; trim to a whole number of seconds"
    )


def write_edf(
    rec: Recording,
    path: str | Path,
    physical_min: float | None = None,
    physical_max: float | None = None,
    digital_min: int = -32768,
    digital_max: int = 32767,
) -> None:
    """Write a Recording as a plain EDF file (one data record).

    The whole recording is stored as a single data record whose duration is
    n_samples / fs; that keeps the sample stream contiguous and makes
    read_edf(write_edf(rec)) exact up to one quantization step
    (physical range / digital range) per sample.

    Default physical range is symmetric around zero, padded 0.1% above the
    largest absolute sample. Samples outside the declared range are an
    error, not a clamp.
    """
    path = Path(path)
    if rec.n_channels < 1 or rec.n_samples < 1:
        raise EdfFormatError("cannot write an empty recording")
    if physical_min is None or physical_max is None:
        peak = float(np.max(np.abs(rec.data))) if rec.data.size else 0.0
        bound = max(peak * 1.001, 1e-3)
        # Keep the bound representable in the 8-char ASCII field.
        bound = float(f"{bound:.6g}")
        while bound < peak:
            bound = float(f"{bound * 1.001:.6g}")
        physical_min, physical_max = -bound, bound
    if physical_min >= physical_max:
        raise EdfFormatError("physical_min must be < physical_max")
    if np.min(rec.data) < physical_min or np.max(rec.data) > physical_max:
        raise EdfFormatError(
            f"samples outside declared physical range [{physical_min}, {physical_max}]"
        )

    n_sig = rec.n_channels
    n_records, duration, spr = _record_layout(rec.n_samples, rec.fs)
    header = bytearray()
    header += _fmt_ascii("0", 8, "version")
    header += _fmt_ascii(rec.meta.get("subject_id", rec.meta.get("patient_id", "X")), 80, "patient")
    header += _fmt_ascii(rec.meta.get("site_id", rec.meta.get("recording_id", "X")), 80, "recording")
    start = rec.meta.get("start", "01.01.00 00.00.00").split(" ")
    header += _fmt_ascii(start[0] if start else "01.01.00", 8, "start date")
    header += _fmt_ascii(start[1] if len(start) > 1 else "00.00.00", 8, "start time")
    header += _fmt_number(_MAIN_HEADER_BYTES * (1 + n_sig), 8, "header bytes")
    header += _fmt_ascii("", 44, "reserved")
    header += _fmt_number(n_records, 8, "n_records")
    header += _fmt_number(duration, 8, "record duration")
    header += _fmt_number(n_sig, 4, "n_signals")

    for label in rec.channels:
        header += _fmt_ascii(label, 16, "label")
    header += b" " * (80 * n_sig)  # transducer
    for _ in range(n_sig):
        header += _fmt_ascii("uV", 8, "dimension")
    for _ in range(n_sig):
        header += _fmt_number(physical_min, 8, "physical min")
    for _ in range(n_sig):
        header += _fmt_number(physical_max, 8, "physical max")
    for _ in range(n_sig):
        header += _fmt_number(digital_min, 8, "digital min")
    for _ in range(n_sig):
        header += _fmt_number(digital_max, 8, "digital max")
    header += b" " * (80 * n_sig)  # prefiltering
    for _ in range(n_sig):
        header += _fmt_number(spr, 8, "samples per record")
    header += b" " * (32 * n_sig)  # reserved

    scale = (digital_max - digital_min) / (physical_max - physical_min)
    digital = np.rint((rec.data - physical_min) * scale + digital_min)
    digital = np.clip(digital, digital_min, digital_max).astype("<i2")
    # Interleave per record: [record, signal, sample-in-record].
    interleaved = digital.reshape(n_sig, n_records, spr).transpose(1, 0, 2)

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        np.ascontiguousarray(interleaved).tofile(fh)


def read_csv(path: str | Path, fs: float) -> Recording:
    """Read the CSV fallback format: a header row of channel labels, then
    one row per sample with one numeric column per channel."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise EdfFormatError(f"{path}: empty file")
    labels = [c.strip() for c in lines[0].split(",")]
    if len(lines) == 1:
        raise EdfFormatError(f"{path}: header-only file, zero samples")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(labels):
            raise EdfFormatError(
                f"{path}:{lineno}: ragged row ({len(cells)} cells for "
                f"{len(labels)} columns)"
            )
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise EdfFormatError(f"{path}:{lineno}: non-numeric cell") from exc
    data = np.asarray(rows, dtype=np.float64).T
    return Recording(channels=labels, fs=fs, data=data, meta={})


def write_csv(rec: Recording, path: str | Path) -> None:
    """Write the CSV fallback: 17 significant digits, value-exact on re-read."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(rec.channels) + "\n")
        for row in rec.data.T:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
