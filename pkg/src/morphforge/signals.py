"""Kinematic-channel instrumentation: CFC low-pass filtering and CORA rating.

The channel-class filter is the standard 2-pole low-pass run forward and
backward (phaseless, 4-pole equivalent) with the coefficients derived from
the class value, applied over odd-mirror end padding. The CORA rating
combines a corridor score with phase/size/shape cross-correlation scores
over an automatically determined evaluation interval; every sub-rating and
the parameters used are kept in the result for auditability.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import filtfilt

from .errors import InputError, UndefinedMetricError

__all__ = [
    "TimeSeries",
    "CoraParams",
    "CoraResult",
    "CFC_CLASSES",
    "cfc_filter",
    "cora_rate",
    "average_components",
    "classify_biofidelity",
    "read_timeseries_csv",
    "write_timeseries_csv",
]

CFC_CLASSES = (60, 180, 600, 1000)

# Digital low-pass design constant relating the channel class value to the
# filter's warped natural frequency.
_CFC_FREQ_FACTOR = 2.0775


@dataclass(frozen=True)
class TimeSeries:
    """Uniformly sampled channel: ``samples`` at spacing ``dt`` seconds from ``t0``."""

    dt: float
    samples: np.ndarray
    label: str = "signal"
    unit: str = ""
    t0: float = 0.0

    def __post_init__(self):
        samples = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float64))
        if self.dt <= 0:
            raise InputError(f"dt must be positive, got {self.dt}")
        if samples.ndim != 1 or len(samples) < 2:
            raise InputError("a time series needs at least 2 samples")
        if not np.all(np.isfinite(samples)):
            raise InputError("time series contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.samples))

    @property
    def duration(self) -> float:
        return self.dt * (len(self.samples) - 1)


def _cfc_coefficients(cfc: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Numerator/denominator of the 2-pole channel-class filter at rate 1/dt."""
    wd = 2.0 * math.pi * cfc * _CFC_FREQ_FACTOR
    wa = math.tan(wd * dt / 2.0)
    denom = 1.0 + math.sqrt(2.0) * wa + wa * wa
    a0 = wa * wa / denom
    b1 = -2.0 * (wa * wa - 1.0) / denom
    b2 = (-1.0 + math.sqrt(2.0) * wa - wa * wa) / denom
    return np.array([a0, 2 * a0, a0]), np.array([1.0, -b1, -b2])


def cfc_pad_samples(cfc: int, dt: float) -> int:
    """Mirror padding: ten filter time constants (1/omega_d) worth of samples."""
    wd = 2.0 * math.pi * cfc * _CFC_FREQ_FACTOR
    return max(int(math.ceil(10.0 / (wd * dt))), 3)


def cfc_filter(series: TimeSeries, cfc: int) -> TimeSeries:
    """Phaseless channel-class low-pass of one series.

    The signal is end-padded by odd mirror reflection, filtered forward and
    backward with the 2-pole class filter, and trimmed. Warns when the
    sampling rate is below 10x the class value.
    """
    if cfc not in CFC_CLASSES:
        raise InputError(f"cfc must be one of {CFC_CLASSES}, got {cfc}")
    fs = 1.0 / series.dt
    if fs < 10.0 * cfc:
        warnings.warn(
            f"sampling rate {fs:.0f} Hz is below 10x CFC {cfc}; response will be distorted",
            RuntimeWarning,
        )
    pad = cfc_pad_samples(cfc, series.dt)
    if len(series.samples) < 2 * pad:
        raise InputError(
            f"signal too short to filter: {len(series.samples)} samples < 2x pad length {pad}"
        )
    b, a = _cfc_coefficients(cfc, series.dt)
    # filtfilt: odd mirror padding, steady-state start, forward then backward
    filtered = filtfilt(b, a, series.samples, padtype="odd", padlen=pad)
    return TimeSeries(series.dt, filtered, series.label, series.unit, series.t0)


# --------------------------------------------------------------------------
# CORA
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CoraParams:
    """Corridor and cross-correlation rating settings.

    Corridor half-widths ``a_0 < b_0`` are fractions of the reference peak
    magnitude; ``a_eval``/``b_eval`` are the peak fractions whose first/last
    crossings bound the rated interval; ``d_min``/``d_max`` are the shift
    fractions of the interval length where the phase score reaches 1 and 0.
    The corridor weight plus the three correlation weights must sum to 1.
    """

    a_0: float = 0.05
    b_0: float = 0.5
    a_eval: float = 0.03
    b_eval: float = 0.075
    w_corridor: float = 0.5
    w_phase: float = 1.0 / 6.0
    w_size: float = 1.0 / 6.0
    w_shape: float = 1.0 / 6.0
    d_min: float = 0.01
    d_max: float = 0.12
    k: float = 2.0

    def __post_init__(self):
        if not (0.0 < self.a_0 < self.b_0):
            raise InputError(f"need 0 < a_0 < b_0, got a_0={self.a_0}, b_0={self.b_0}")
        weights = (self.w_corridor, self.w_phase, self.w_size, self.w_shape)
        if any(w < 0 for w in weights):
            raise InputError("weights must be >= 0")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise InputError(f"weights must sum to 1, got {sum(weights)}")
        if not (0.0 <= self.d_min < self.d_max):
            raise InputError(f"need 0 <= d_min < d_max, got {self.d_min}, {self.d_max}")


@dataclass(frozen=True)
class CoraResult:
    """Total rating with its sub-ratings and the rated time interval."""

    total: float
    corridor_rating: float
    phase_rating: float
    size_rating: float
    shape_rating: float
    t_start: float
    t_end: float
    shift_samples: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _resample_to(reference: TimeSeries, test: TimeSeries) -> np.ndarray:
    """Test samples on the reference time grid (linear interpolation)."""
    if math.isclose(reference.dt, test.dt, rel_tol=1e-9) and math.isclose(
        reference.t0, test.t0, rel_tol=0.0, abs_tol=1e-12
    ):
        n = len(reference.samples)
        out = np.zeros(n)
        m = min(n, len(test.samples))
        out[:m] = test.samples[:m]
        return out
    ratio = max(reference.dt, test.dt) / min(reference.dt, test.dt)
    if ratio > 10.0:
        raise InputError(
            f"dt mismatch beyond resampling tolerance: {reference.dt} vs {test.dt}"
        )
    t_ref = reference.times
    if t_ref[-1] < test.t0 or t_ref[0] > test.times[-1]:
        raise InputError("signals have no overlapping time support")
    return np.interp(t_ref, test.times, test.samples, left=0.0, right=0.0)


def cora_rate(
    reference: TimeSeries, test: TimeSeries, params: CoraParams | None = None
) -> CoraResult:
    """Rate how well ``test`` reproduces ``reference`` on a 0..1 scale."""
    if params is None:
        params = CoraParams()
    ref = reference.samples
    peak = float(np.max(np.abs(ref)))
    if peak == 0.0:
        raise UndefinedMetricError("reference signal is identically zero; corridors collapse")
    tst = _resample_to(reference, test)

    above_a = np.abs(ref) >= params.a_eval * peak
    above_b = np.abs(ref) >= params.b_eval * peak
    i0 = int(np.argmax(above_a))
    i1 = int(len(ref) - 1 - np.argmax(above_b[::-1]))
    if i1 <= i0:
        i0, i1 = 0, len(ref) - 1
    n_int = i1 - i0 + 1

    # the interval always contains the peak sample, so the corridor scales
    # with the same peak used to find the interval
    r = ref[i0 : i1 + 1]
    t = tst[i0 : i1 + 1]

    # corridor score: 1 inside the inner corridor, 0 outside the outer,
    # polynomial transition between
    inner = params.a_0 * peak
    outer = params.b_0 * peak
    err = np.abs(t - r)
    transition = np.clip((outer - err) / (outer - inner), 0.0, 1.0) ** params.k
    per_sample = np.where(err <= inner, 1.0, np.where(err >= outer, 0.0, transition))
    corridor = float(per_sample.mean())

    # cross-correlation sub-ratings at the in-window shift maximizing K
    max_shift = int(round(params.d_max * n_int))
    ref_sq = float(np.dot(r, r))
    best_k = -np.inf
    best_shift = 0
    for shift in range(-max_shift, max_shift + 1):
        shifted = _shifted_segment(tst, i0 + shift, n_int)
        denom = math.sqrt(ref_sq * float(np.dot(shifted, shifted)))
        k_val = float(np.dot(r, shifted)) / denom if denom > 0 else 0.0
        if k_val > best_k:
            best_k = k_val
            best_shift = shift

    shifted = _shifted_segment(tst, i0 + best_shift, n_int)
    phase = _clip01((params.d_max * n_int - abs(best_shift)) / ((params.d_max - params.d_min) * n_int))
    area_ref = float(np.dot(r, r))
    area_tst = float(np.dot(shifted, shifted))
    if area_tst == 0.0:
        size = 0.0
    else:
        size = min(area_ref, area_tst) / max(area_ref, area_tst)
    shape = max(best_k, 0.0)

    total = (
        params.w_corridor * corridor
        + params.w_phase * phase
        + params.w_size * size
        + params.w_shape * shape
    )
    times = reference.times
    return CoraResult(
        total=float(total),
        corridor_rating=corridor,
        phase_rating=float(phase),
        size_rating=float(size),
        shape_rating=float(shape),
        t_start=float(times[i0]),
        t_end=float(times[i1]),
        shift_samples=best_shift,
    )


def _shifted_segment(data: np.ndarray, start: int, length: int) -> np.ndarray:
    """length samples from ``start``; out-of-range reads 0."""
    out = np.zeros(length)
    lo = max(start, 0)
    hi = min(start + length, len(data))
    if hi > lo:
        out[lo - start : hi - start] = data[lo:hi]
    return out


def _clip01(x: float) -> float:
    return min(max(x, 0.0), 1.0)


def average_components(x: CoraResult, y: CoraResult, z: CoraResult) -> float:
    """Mean of the three axis totals (whole-channel score of a 3-axis sensor)."""
    return (x.total + y.total + z.total) / 3.0


def classify_biofidelity(score: float) -> str:
    """good above 0.68, fair above 0.44, otherwise poor (strictly-above)."""
    if not (0.0 <= score <= 1.0):
        raise InputError(f"score must be in [0, 1], got {score}")
    if score > 0.68:
        return "good"
    if score > 0.44:
        return "fair"
    return "poor"


# --------------------------------------------------------------------------
# CSV I/O: header `time_s,<label>`, one sample per row
# --------------------------------------------------------------------------

def read_timeseries_csv(path: str | os.PathLike) -> TimeSeries:
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 3:
        raise InputError(f"{path}: need a header and at least 2 samples")
    header = rows[0]
    if len(header) != 2 or header[0] != "time_s":
        raise InputError(f"{path}: expected header 'time_s,<label>', got {header}")
    label = header[1]
    try:
        times = np.array([float(r[0]) for r in rows[1:]])
        values = np.array([float(r[1]) for r in rows[1:]])
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed sample row: {exc}") from exc
    steps = np.diff(times)
    dt = float(steps[0])
    if dt <= 0 or not np.allclose(steps, dt, rtol=1e-6, atol=1e-12):
        raise InputError(f"{path}: time column is not uniformly increasing")
    return TimeSeries(dt, values, label=label, t0=float(times[0]))


def write_timeseries_csv(series: TimeSeries, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", series.label])
        for t, v in zip(series.times, series.samples):
            writer.writerow([repr(float(t)), repr(float(v))])
