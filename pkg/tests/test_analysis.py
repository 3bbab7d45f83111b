import cmath
import math

import numpy as np
import pytest

from chilrig.analysis import (
    BandVerdict,
    EmptySeries,
    InvalidBase,
    NeverReached,
    NyquistViolation,
    PhasorTriple,
    SequenceSet,
    WindowTooShort,
    band_check,
    fundamental_phasor,
    inverse_symmetrical_components,
    per_unit,
    rise_time,
    rms,
    sliding_positive_sequence,
    symmetrical_components,
    thd,
)

F0 = 50.0
DT = 1.0 / (F0 * 400)  # 400 samples per period


def sine(amp, f, dt, n, phase=0.0, harmonic_amp=0.0, harmonic=3):
    t = np.arange(n) * dt
    x = amp * np.sin(2 * np.pi * f * t + phase)
    if harmonic_amp:
        x = x + harmonic_amp * np.sin(2 * np.pi * f * harmonic * t + harmonic * phase)
    return x


# ---------------------------------------------------------------- rms


def test_rms_of_pure_sine_is_amplitude_over_sqrt2():
    x = sine(2.0, F0, DT, 400)
    assert rms(x) == pytest.approx(2.0 / math.sqrt(2.0), rel=1e-12)


def test_rms_of_constant_is_the_constant():
    assert rms(np.full(100, 3.5)) == pytest.approx(3.5, rel=1e-15)


def test_rms_of_sine_plus_dc_matches_closed_form():
    # sqrt(c^2 + A^2/2) with A=1, c=0.5 -> sqrt(0.75)
    x = sine(1.0, F0, DT, 400) + 0.5
    assert rms(x) == pytest.approx(math.sqrt(0.75), rel=1e-12)


def test_rms_rejects_single_sample():
    with pytest.raises(WindowTooShort):
        rms([1.0])


# ---------------------------------------------------- fundamental phasor


def test_unit_rms_sine_gives_magnitude_one():
    x = sine(math.sqrt(2.0), F0, DT, 400)
    assert abs(fundamental_phasor(x, F0, DT)) == pytest.approx(1.0, abs=1e-12)


def test_pure_third_harmonic_projects_to_zero():
    t = np.arange(400) * DT
    x = np.sqrt(2.0) * np.sin(2 * np.pi * 3 * F0 * t)
    assert abs(fundamental_phasor(x, F0, DT)) < 1e-12


def test_third_harmonic_does_not_disturb_fundamental():
    x = sine(math.sqrt(2.0), F0, DT, 400, harmonic_amp=0.1 * math.sqrt(2.0))
    assert abs(fundamental_phasor(x, F0, DT)) == pytest.approx(1.0, abs=1e-9)


def test_phasor_linearity():
    rng = np.random.default_rng(11)
    for _ in range(20):
        pa, pb = rng.uniform(0, 2 * np.pi, size=2)
        x = sine(1.3, F0, DT, 400, phase=pa)
        y = sine(0.7, F0, DT, 400, phase=pb)
        al, be = rng.uniform(-2, 2, size=2)
        lhs = fundamental_phasor(al * x + be * y, F0, DT)
        rhs = al * fundamental_phasor(x, F0, DT) + be * fundamental_phasor(y, F0, DT)
        assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(rhs))


def test_phasor_window_must_be_one_period():
    with pytest.raises(WindowTooShort):
        fundamental_phasor(np.zeros(399), F0, DT)


# ------------------------------------------------- symmetrical components


def polar(mag, deg):
    return cmath.rect(mag, math.radians(deg))


def test_balanced_positive_set():
    pt = PhasorTriple(polar(1, 0), polar(1, -120), polar(1, 120))
    seq = symmetrical_components(pt)
    assert abs(seq.positive - 1.0) < 1e-12
    assert abs(seq.negative) < 1e-12
    assert abs(seq.zero) < 1e-12


def test_reversed_sequence_set():
    pt = PhasorTriple(polar(1, 0), polar(1, 120), polar(1, -120))
    seq = symmetrical_components(pt)
    assert abs(seq.negative - 1.0) < 1e-12
    assert abs(seq.positive) < 1e-12
    assert abs(seq.zero) < 1e-12


def test_single_phase_splits_equally():
    pt = PhasorTriple(1.0 + 0j, 0j, 0j)
    seq = symmetrical_components(pt)
    for comp in (seq.positive, seq.negative, seq.zero):
        assert abs(comp - 1.0 / 3.0) < 1e-12


def test_fortescue_round_trip_random_triples():
    rng = np.random.default_rng(7)
    for _ in range(200):
        vals = rng.normal(size=6)
        pt = PhasorTriple(
            complex(vals[0], vals[1]),
            complex(vals[2], vals[3]),
            complex(vals[4], vals[5]),
        )
        back = inverse_symmetrical_components(symmetrical_components(pt))
        for orig, rec in zip(pt.as_tuple(), back.as_tuple()):
            assert abs(orig - rec) <= 1e-12 * max(1.0, abs(orig))


def test_balanced_set_any_magnitude_and_phase():
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = rng.uniform(0.01, 100.0)
        ph = rng.uniform(0, 2 * np.pi)
        pt = PhasorTriple(
            cmath.rect(m, ph),
            cmath.rect(m, ph - 2 * np.pi / 3),
            cmath.rect(m, ph + 2 * np.pi / 3),
        )
        seq = symmetrical_components(pt)
        assert abs(abs(seq.positive) - m) <= 1e-12 * m
        assert abs(seq.negative) <= 1e-12 * m
        assert abs(seq.zero) <= 1e-12 * m


# ------------------------------------------------------------------ thd


def test_thd_of_pure_sine_is_zero():
    x = sine(math.sqrt(2.0), F0, DT, 400)
    assert thd(x, F0, DT, 19) <= 1e-9


def test_thd_of_ten_percent_third_harmonic():
    x = sine(math.sqrt(2.0), F0, DT, 400, harmonic_amp=0.1 * math.sqrt(2.0))
    assert thd(x, F0, DT, 19) == pytest.approx(0.100, abs=1e-6)


def test_thd_of_sampled_square_wave_to_h49():
    # 100 samples/period; +1 first half, -1 second half. Frozen oracle:
    # direct DFT of this sequence gives THD(49) = 0.4830059340528578.
    n = 100
    dt = 1.0 / (F0 * n)
    x = np.where(np.arange(n) < n // 2, 1.0, -1.0)
    got = thd(x, F0, dt, 49)
    assert got == pytest.approx(0.4830059340528578, abs=1e-12)
    assert got == pytest.approx(0.4829, abs=1e-3)


def test_thd_square_wave_against_independent_dft():
    # brute-force single-bin DFT, independent of the implementation
    n = 100
    dt = 1.0 / (F0 * n)
    x = [1.0 if k < n // 2 else -1.0 for k in range(n)]

    def bin_rms(sig, h):
        s = sum(
            sig[k] * cmath.exp(-2j * math.pi * h * k / len(sig))
            for k in range(len(sig))
        )
        return abs(s) * math.sqrt(2.0) / len(sig)

    expect = math.sqrt(sum(bin_rms(x, h) ** 2 for h in range(2, 50))) / bin_rms(x, 1)
    assert thd(np.asarray(x), F0, dt, 49) == pytest.approx(expect, abs=1e-12)


def test_thd_phase_shift_invariance():
    rng = np.random.default_rng(23)
    base_amps = [1.0, 0.2, 0.05, 0.01]
    for _ in range(10):
        shift = rng.uniform(0, 2 * np.pi)
        t = np.arange(400) * DT

        def wave(phase0):
            x = np.zeros_like(t)
            for h, a in enumerate(base_amps, start=1):
                x = x + a * np.sin(2 * np.pi * h * F0 * t + h * phase0)
            return x

        a = thd(wave(0.0), F0, DT, 10)
        b = thd(wave(shift), F0, DT, 10)
        assert abs(a - b) <= 1e-9


def test_thd_nyquist_guard():
    x = sine(1.0, F0, DT, 400)
    with pytest.raises(NyquistViolation):
        thd(x, F0, DT, 250)  # 250*50 Hz >= 10 kHz Nyquist


# ----------------------------------------------------------- band check


def test_constant_inside_band_passes():
    t = np.linspace(0, 1, 101)
    v = np.ones(101)
    verdict = band_check(t, v, upper=1.2, lower=0.9)
    assert verdict.passed
    assert verdict.violations == []


def test_single_excursion_fails_with_one_violation():
    t = np.linspace(0, 1, 101)
    v = np.ones(101)
    v[40:43] = 1.25
    verdict = band_check(t, v, upper=1.2, lower=0.9)
    assert not verdict.passed
    assert len(verdict.violations) == 1
    assert verdict.violations[0]["worst"] == pytest.approx(1.25)


def test_excursion_inside_settle_window_is_masked():
    t = np.linspace(0, 1, 1001)
    v = np.ones(1001)
    v[(t >= 0.2) & (t <= 0.24)] = 0.5  # dip right after the event
    verdict = band_check(t, v, upper=1.2, lower=0.9, settle=0.06, events=[0.2])
    assert verdict.passed
    assert len(verdict.masked) == 1
    assert verdict.settle_honored


def test_band_check_rescan_completeness():
    rng = np.random.default_rng(5)
    t = np.linspace(0, 2, 2001)
    v = 1.0 + 0.25 * np.sin(2 * np.pi * 1.3 * t) + rng.normal(0, 0.02, t.size)
    events = [0.5, 1.4]
    settle = 0.08
    verdict = band_check(t, v, upper=1.2, lower=0.9, settle=settle, events=events)
    outside_settle = np.ones(t.size, dtype=bool)
    for ev in events:
        outside_settle &= ~((t >= ev) & (t <= ev + settle))
    ok = (v[outside_settle] <= 1.2 + 1e-9) & (v[outside_settle] >= 0.9 - 1e-9)
    assert verdict.passed == bool(ok.all())


def test_band_check_empty_series_raises():
    with pytest.raises(EmptySeries):
        band_check([], [], upper=1.0, lower=0.0)


# ------------------------------------------------------------ rise time


def test_ideal_step_has_zero_rise_time():
    t = np.linspace(0, 1, 1001)
    v = np.where(t >= 0.2, 1.0, 0.0)
    assert rise_time(t, v, event_t=0.2, target=1.0) == 0.0


def test_first_order_rise_time_is_ln9_tau():
    tau = 0.05
    dt = 1e-4
    t = np.arange(0, 1.0, dt)
    v = 1.0 - np.exp(-t / tau)
    got = rise_time(t, v, event_t=0.0, target=1.0)
    assert abs(got - math.log(9.0) * tau) <= dt


def test_rise_time_never_reached():
    t = np.linspace(0, 1, 101)
    v = np.full(101, 0.8)
    with pytest.raises(NeverReached):
        rise_time(t, v, event_t=0.0, target=1.0)


# ------------------------------------------------------------- per unit


def test_per_unit_simple_cases():
    assert per_unit(np.array([100.0]), 100.0)[0] == pytest.approx(1.0)
    assert per_unit(np.array([120.0]), 100.0)[0] == pytest.approx(1.2)


def test_per_unit_zero_base_rejected():
    with pytest.raises(InvalidBase):
        per_unit(np.array([1.0]), 0.0)


# ------------------------------------- sliding positive-sequence series


def test_sliding_positive_sequence_of_balanced_sines():
    n = 400
    cycles = 5
    t = np.arange(n * cycles) * DT
    amp = math.sqrt(2.0) * 10.0
    xa = amp * np.sin(2 * np.pi * F0 * t)
    xb = amp * np.sin(2 * np.pi * F0 * t - 2 * np.pi / 3)
    xc = amp * np.sin(2 * np.pi * F0 * t + 2 * np.pi / 3)
    ends, mags = sliding_positive_sequence(xa, xb, xc, F0, DT)
    assert ends[0] == n - 1
    assert ends[-1] == n * cycles - 1
    assert np.allclose(mags, 10.0, atol=1e-9)


def test_sliding_positive_sequence_tracks_amplitude_step():
    n = 400
    t = np.arange(n * 4) * DT
    amp = np.where(t < 2 * n * DT, 1.0, 0.5) * math.sqrt(2.0)
    xa = amp * np.sin(2 * np.pi * F0 * t)
    xb = amp * np.sin(2 * np.pi * F0 * t - 2 * np.pi / 3)
    xc = amp * np.sin(2 * np.pi * F0 * t + 2 * np.pi / 3)
    ends, mags = sliding_positive_sequence(xa, xb, xc, F0, DT)
    assert mags[0] == pytest.approx(1.0, abs=1e-9)
    assert mags[-1] == pytest.approx(0.5, abs=1e-9)
