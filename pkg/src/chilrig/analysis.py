"""Signal analysis kit: RMS, fundamental phasors, symmetrical components,
THD, per-unit scaling, limit-band checking and rise-time measurement.

All phasors use the RMS magnitude convention: the magnitude of the phasor
of x(t) = sqrt(2)*X*sin(w*t) is X. Angles are referenced to a cosine at the
start of the analysis window.

Every function here is pure and safe to call from any number of threads.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

# rotation operator of the Fortescue transform, exp(j*2*pi/3)
_ALPHA = cmath.exp(2j * math.pi / 3.0)


class WindowTooShort(ValueError):
    """Analysis window does not cover the required number of samples."""


class NyquistViolation(ValueError):
    """A requested harmonic lies at or above the sampling Nyquist limit."""


class EmptySeries(ValueError):
    """A series operation received no samples."""


class NeverReached(ValueError):
    """A threshold crossing required by the measurement never happens."""


class InvalidBase(ValueError):
    """Per-unit base must be strictly positive."""


@dataclass(frozen=True)
class PhasorTriple:
    """Complex per-phase fundamental phasors (RMS convention) at one frequency."""

    a: complex
    b: complex
    c: complex

    def as_tuple(self) -> tuple[complex, complex, complex]:
        return (self.a, self.b, self.c)


@dataclass(frozen=True)
class SequenceSet:
    """Fortescue decomposition of a PhasorTriple."""

    positive: complex
    negative: complex
    zero: complex


@dataclass
class BandVerdict:
    """Result of checking a series against an upper/lower limit band.

    ``violations`` holds the merged out-of-band intervals that lie outside
    every settle window; ``masked`` holds the excursions that were excluded
    because they fall inside a settle window (kept as evidence).
    """

    passed: bool
    violations: list[dict] = field(default_factory=list)
    masked: list[dict] = field(default_factory=list)
    settle_honored: bool = True


def rms(samples, n: int | None = None) -> float:
    """Root mean square of ``samples`` (optionally of the first ``n`` only).

    The window is expected to cover an integer number of fundamental
    periods; with fewer than 2 samples there is nothing to average and
    WindowTooShort is raised.
    """
    x = np.asarray(samples, dtype=float)
    if n is not None:
        x = x[:n]
    if x.size < 2:
        raise WindowTooShort(f"rms needs at least 2 samples, got {x.size}")
    return float(math.sqrt(np.mean(x * x)))


def fundamental_phasor(window, f0: float, dt: float) -> complex:
    """Single-bin discrete Fourier projection of one fundamental period.

    Computes (sqrt(2)/N) * sum_k x[k] * exp(-j*2*pi*k/N) over exactly
    N = round(1/(f0*dt)) samples, i.e. the RMS-convention phasor of the
    f0 component with angle relative to the window start.
    """
    n = _samples_per_period(f0, dt)
    x = np.asarray(window, dtype=float)
    if x.size != n:
        raise WindowTooShort(
            f"window must span exactly one period ({n} samples), got {x.size}"
        )
    k = np.arange(n)
    kernel = np.exp(-2j * np.pi * k / n)
    return complex(np.dot(x, kernel) * math.sqrt(2.0) / n)


def symmetrical_components(pt: PhasorTriple) -> SequenceSet:
    """Fortescue transform of a three-phase phasor set.

    zero     = (a + b + c) / 3
    positive = (a + alpha*b + alpha^2*c) / 3
    negative = (a + alpha^2*b + alpha*c) / 3     with alpha = exp(j*2*pi/3)
    """
    a, b, c = pt.a, pt.b, pt.c
    zero = (a + b + c) / 3.0
    positive = (a + _ALPHA * b + _ALPHA * _ALPHA * c) / 3.0
    negative = (a + _ALPHA * _ALPHA * b + _ALPHA * c) / 3.0
    return SequenceSet(positive=positive, negative=negative, zero=zero)


def inverse_symmetrical_components(seq: SequenceSet) -> PhasorTriple:
    """Inverse Fortescue transform; reconstructs the phase phasors."""
    a = seq.zero + seq.positive + seq.negative
    b = seq.zero + _ALPHA * _ALPHA * seq.positive + _ALPHA * seq.negative
    c = seq.zero + _ALPHA * seq.positive + _ALPHA * _ALPHA * seq.negative
    return PhasorTriple(a=a, b=b, c=c)


def harmonic_phasor(window, f0: float, dt: float, harmonic: int) -> complex:
    """Single-bin projection at ``harmonic`` * f0 over an integer number of
    fundamental periods (the largest number that fits the window)."""
    n = _samples_per_period(f0, dt)
    x = np.asarray(window, dtype=float)
    periods = x.size // n
    if periods < 1:
        raise WindowTooShort(
            f"window must span at least one period ({n} samples), got {x.size}"
        )
    m = periods * n
    x = x[:m]
    k = np.arange(m)
    kernel = np.exp(-2j * np.pi * harmonic * periods * k / m)
    return complex(np.dot(x, kernel) * math.sqrt(2.0) / m)


def thd(window, f0: float, dt: float, n_harmonics: int) -> float:
    """Total harmonic distortion sqrt(sum_{h=2..n} |X_h|^2) / |X_1|.

    Each X_h is the single-bin projection at h*f0 over the same window.
    Harmonics at or above the Nyquist frequency are rejected.
    """
    if n_harmonics < 2:
        raise ValueError("n_harmonics must be >= 2")
    nyquist = 0.5 / dt
    if n_harmonics * f0 >= nyquist:
        raise NyquistViolation(
            f"harmonic {n_harmonics} at {n_harmonics * f0:g} Hz is not below "
            f"the Nyquist frequency {nyquist:g} Hz"
        )
    fund = abs(harmonic_phasor(window, f0, dt, 1))
    if fund == 0.0:
        raise ValueError("fundamental component is zero; THD undefined")
    acc = 0.0
    for h in range(2, n_harmonics + 1):
        acc += abs(harmonic_phasor(window, f0, dt, h)) ** 2
    return math.sqrt(acc) / fund


def per_unit(series, base: float):
    """Element-wise division of ``series`` by a strictly positive base."""
    if not (base > 0.0):
        raise InvalidBase(f"base must be > 0, got {base!r}")
    return np.asarray(series, dtype=float) / base


def band_check(
    t,
    values,
    upper: float,
    lower: float,
    settle: float = 0.0,
    events: tuple[float, ...] | list[float] = (),
    tol: float = 1e-9,
) -> BandVerdict:
    """Check a time series against an upper/lower band with settle windows.

    A sample violates the band when value > upper + tol or value < lower -
    tol (tol absorbs last-bit float noise in measured series). Samples
    falling within ``settle`` seconds after any event time are excluded
    from the verdict but recorded in ``masked``. Contiguous violating
    samples merge into one interval with its worst value.
    """
    tt = np.asarray(t, dtype=float)
    vv = np.asarray(values, dtype=float)
    if tt.size == 0 or vv.size == 0:
        raise EmptySeries("band_check needs a non-empty series")
    if tt.size != vv.size:
        raise ValueError("time and value series differ in length")

    out_of_band = (vv > upper + tol) | (vv < lower - tol)
    in_settle = np.zeros_like(out_of_band)
    for ev in events:
        in_settle |= (tt >= ev) & (tt <= ev + settle)

    violations = _merge_intervals(tt, vv, out_of_band & ~in_settle, upper, lower)
    masked = _merge_intervals(tt, vv, out_of_band & in_settle, upper, lower)
    return BandVerdict(
        passed=not violations,
        violations=violations,
        masked=masked,
        settle_honored=bool(settle > 0.0 and len(events) > 0),
    )


def rise_time(
    t,
    values,
    event_t: float,
    target: float,
    low_frac: float = 0.1,
    high_frac: float = 0.9,
) -> float:
    """Rise time of a step-like response after ``event_t``.

    Returns t(first sample >= high_frac*target) - t(first sample >=
    low_frac*target), both searched from the first sample at or after the
    event. Raises NeverReached when the high threshold is never attained.
    """
    tt = np.asarray(t, dtype=float)
    vv = np.asarray(values, dtype=float)
    if tt.size == 0:
        raise EmptySeries("rise_time needs a non-empty series")
    after = tt >= event_t
    if not after.any():
        raise NeverReached(f"no samples at or after t={event_t:g}")
    tt, vv = tt[after], vv[after]
    lo_hits = np.nonzero(vv >= low_frac * target)[0]
    hi_hits = np.nonzero(vv >= high_frac * target)[0]
    if hi_hits.size == 0:
        raise NeverReached(
            f"series never reaches {high_frac:g} * {target:g} after t={event_t:g}"
        )
    if lo_hits.size == 0:  # unreachable when high_frac >= low_frac
        raise NeverReached(
            f"series never reaches {low_frac:g} * {target:g} after t={event_t:g}"
        )
    return float(tt[hi_hits[0]] - tt[lo_hits[0]])


def sliding_positive_sequence(
    xa, xb, xc, f0: float, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Magnitude of the positive-sequence fundamental phasor on a sliding
    one-period window advanced sample by sample.

    Returns (end_indices, magnitudes): entry i is computed from the window
    ending at sample end_indices[i] (the first value appears once one full
    period of data exists).
    """
    n = _samples_per_period(f0, dt)
    a = np.asarray(xa, dtype=float)
    if a.size < n:
        raise WindowTooShort(
            f"series shorter than one period ({n} samples): {a.size}"
        )
    k = np.arange(n)
    kernel = np.exp(-2j * np.pi * k / n) * (math.sqrt(2.0) / n)
    # correlate(x, conj(kernel)) gives sum x[i+k]*kernel[k] per window start
    ph = [
        np.correlate(np.asarray(x, dtype=float), np.conj(kernel), mode="valid")
        for x in (xa, xb, xc)
    ]
    pos = (ph[0] + _ALPHA * ph[1] + _ALPHA * _ALPHA * ph[2]) / 3.0
    ends = np.arange(n - 1, a.size)
    return ends, np.abs(pos)


def _samples_per_period(f0: float, dt: float) -> int:
    if f0 <= 0.0 or dt <= 0.0:
        raise ValueError("f0 and dt must be positive")
    n = int(round(1.0 / (f0 * dt)))
    if n < 2:
        raise WindowTooShort(f"fewer than 2 samples per period at f0={f0}, dt={dt}")
    return n


def _merge_intervals(tt, vv, mask, upper: float, lower: float) -> list[dict]:
    """Merge a boolean sample mask into contiguous {t_start, t_end, worst}."""
    out: list[dict] = []
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return out
    run_start = idx[0]
    prev = idx[0]
    for i in idx[1:]:
        if i != prev + 1:
            out.append(_interval(tt, vv, run_start, prev, upper, lower))
            run_start = i
        prev = i
    out.append(_interval(tt, vv, run_start, prev, upper, lower))
    return out


def _interval(tt, vv, i0, i1, upper: float, lower: float) -> dict:
    seg = vv[i0 : i1 + 1]
    # worst = sample with the largest distance outside the band
    dist = np.maximum(seg - upper, lower - seg)
    w = int(np.argmax(dist))
    return {
        "t_start": float(tt[i0]),
        "t_end": float(tt[i1]),
        "worst": float(seg[w]),
    }
