"""Range-time, frequency-time and range-Doppler views of a pulse matrix.

All three are plain magnitudes of the raw echo or of its DFT; nothing here
normalizes, standardizes or otherwise depends on dataset statistics.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .uwbsim import PulseMatrix

__all__ = [
    "RANGE_TIME",
    "FREQUENCY_TIME",
    "RANGE_DOPPLER",
    "Axis",
    "DomainMap",
    "CropSpec",
    "range_map",
    "frequency_map",
    "range_doppler_map",
    "crop",
    "band_rows",
    "window_slices",
    "ALERT_RANGE_ROI",
    "ALERT_FREQ_ROWS",
]

RANGE_TIME = "RangeTime"
FREQUENCY_TIME = "FrequencyTime"
RANGE_DOPPLER = "RangeDoppler"
KINDS = (RANGE_TIME, FREQUENCY_TIME, RANGE_DOPPLER)

_AXES = {
    RANGE_TIME: ("range", "slow_time"),
    FREQUENCY_TIME: ("frequency", "slow_time"),
    RANGE_DOPPLER: ("range", "doppler"),
}

# Row windows of the published experiment configuration (end exclusive).
ALERT_RANGE_ROI = (8, 59)
ALERT_FREQ_ROWS = (89, 178)


@dataclass(frozen=True)
class Axis:
    """What one matrix axis indexes: bin kind, first bin index, bin spacing."""

    kind: str
    start: int = 0
    step: float = 1.0
    units: str = "bin"


@dataclass
class DomainMap:
    kind: str
    data: np.ndarray
    row_axis: Axis
    col_axis: Axis
    label: str = ""
    subject_id: int = 0
    sample_id: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown map kind {self.kind!r}")
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"map data must be 2-D, got shape {self.data.shape}")
        if (self.row_axis.kind, self.col_axis.kind) != _AXES[self.kind]:
            raise ValueError(
                f"{self.kind} needs axes {_AXES[self.kind]}, got ({self.row_axis.kind}, {self.col_axis.kind})"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class CropSpec:
    row_start: int
    row_end: int
    col_start: int = 0
    col_end: int | None = None


def _meta(m: PulseMatrix):
    return dict(label=m.label, subject_id=m.subject_id, sample_id=m.sample_id)


def _magnitude(x, log):
    out = np.abs(x)
    if log:
        out = 20.0 * np.log10(out + 1e-12)
    return out


def range_map(m: PulseMatrix, signed: bool = False, log: bool = False) -> DomainMap:
    """Echo magnitude over range bins x slow time (``signed`` keeps raw values)."""
    data = np.array(m.data, dtype=np.float64) if signed else _magnitude(m.data.astype(np.float64), log)
    return DomainMap(
        RANGE_TIME,
        data,
        Axis("range"),
        Axis("slow_time", step=1.0 / m.frame_rate, units="s"),
        **_meta(m),
    )


def frequency_map(m: PulseMatrix, axis: str = "fast", log: bool = False, nperseg: int = 64) -> DomainMap:
    """Per-frame DFT magnitude of the fast-time echo (frequency bins x slow time).

    ``axis="slow"`` selects the alternative reading: a sliding-window DFT along
    slow time of the range-summed echo, ``nperseg//2 + 1`` rows, one column per
    frame (frames centred, edges zero-padded).
    """
    x = m.data.astype(np.float64)
    if axis == "fast":
        if m.fast_bins < 2:
            raise ValueError("frequency map needs fast_bins >= 2")
        data = _magnitude(np.fft.fft(x, axis=0), log)
        rows = Axis("frequency", step=1.0 / m.fast_bins, units="cycles/bin")
    elif axis == "slow":
        sig = x.sum(axis=0)
        half = nperseg // 2
        padded = np.pad(sig, (half, nperseg - half - 1))
        frames = np.lib.stride_tricks.sliding_window_view(padded, nperseg)
        win = np.hanning(nperseg)
        data = _magnitude(np.fft.rfft(frames * win, axis=1), log).T
        rows = Axis("frequency", step=m.frame_rate / nperseg, units="Hz")
    else:
        raise ValueError(f"axis must be 'fast' or 'slow', got {axis!r}")
    return DomainMap(FREQUENCY_TIME, data, rows, Axis("slow_time", step=1.0 / m.frame_rate, units="s"), **_meta(m))


def range_doppler_map(m: PulseMatrix, log: bool = False) -> DomainMap:
    """Slow-time DFT magnitude per range bin, zero Doppler at column ``slow_bins // 2``."""
    if m.slow_bins < 2:
        raise ValueError("range-Doppler map needs slow_bins >= 2")
    spec = np.fft.fftshift(np.fft.fft(m.data.astype(np.float64), axis=1), axes=1)
    n = m.slow_bins
    return DomainMap(
        RANGE_DOPPLER,
        _magnitude(spec, log),
        Axis("range"),
        Axis("doppler", start=-(n // 2), step=m.frame_rate / n, units="Hz"),
        **_meta(m),
    )


def crop(dm: DomainMap, spec: CropSpec) -> DomainMap:
    rows, cols = dm.shape
    c_end = cols if spec.col_end is None else spec.col_end
    if not (0 <= spec.row_start < spec.row_end <= rows):
        raise ValueError(f"row crop [{spec.row_start}, {spec.row_end}) out of bounds for {rows} rows")
    if not (0 <= spec.col_start < c_end <= cols):
        raise ValueError(f"column crop [{spec.col_start}, {c_end}) out of bounds for {cols} columns")
    return dataclasses.replace(
        dm,
        data=dm.data[spec.row_start : spec.row_end, spec.col_start : c_end].copy(),
        row_axis=dataclasses.replace(dm.row_axis, start=dm.row_axis.start + spec.row_start),
        col_axis=dataclasses.replace(dm.col_axis, start=dm.col_axis.start + spec.col_start),
    )


def band_rows(band: str, n_rows: int) -> tuple[int, int]:
    """Row window of a frequency band preset: ``lower`` / ``higher`` / ``full`` half-splits."""
    half = n_rows // 2
    try:
        return {"lower": (0, half), "higher": (half, n_rows), "full": (0, n_rows)}[band]
    except KeyError:
        raise ValueError(f"band must be lower, higher or full, got {band!r}") from None


def window_slices(m: PulseMatrix, window_s: float, stride_s: float | None = None) -> list[PulseMatrix]:
    """Slow-time slices of ``round(window_s * frame_rate)`` frames; the partial tail is dropped."""
    n = int(round(window_s * m.frame_rate))
    if n < 1:
        raise ValueError(f"window of {window_s} s is shorter than one frame at {m.frame_rate} Hz")
    step = n if stride_s is None else int(round(stride_s * m.frame_rate))
    if step < 1:
        raise ValueError(f"stride of {stride_s} s is shorter than one frame")
    out = []
    for i, start in enumerate(range(0, m.slow_bins - n + 1, step)):
        out.append(
            dataclasses.replace(
                m,
                data=m.data[:, start : start + n].copy(),
                sample_id=f"{m.sample_id}@w{i}" if m.sample_id else f"w{i}",
            )
        )
    return out
