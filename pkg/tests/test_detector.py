import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snspdsim.detector import (
    MicrostripProfile,
    WireParams,
    dark_count_rate,
    dead_time,
    ide,
    ide_vs_delay,
    kinetic_inductance,
    plateau_width,
    recovery_current,
    reset_time,
)

# Independent high-precision value of 0.5 * erfc(-1) (mpmath, 30 digits).
HALF_ERFC_MINUS_ONE = 0.921350396474857434670610317541
ONE_MINUS_INV_E = 0.632120558828557678404476229839


def random_wire(rng: np.random.Generator) -> WireParams:
    i_detect = rng.uniform(3.0, 12.0)
    sigma = rng.uniform(0.1, 1.0)
    i_switch = i_detect + sigma + rng.uniform(0.5, 5.0)
    return WireParams(
        i_detect=i_detect, sigma=sigma, i_switch=i_switch,
        i_latch=i_switch + 0.5,
        bias_fraction=rng.uniform(0.85, 1.0),
        l_kinetic=rng.uniform(100.0, 1000.0),
        r_load=rng.uniform(50.0, 200.0),
    )


class TestIde:
    def test_half_at_inflection(self, wire):
        assert ide(wire.i_detect, wire) == pytest.approx(0.5, abs=1e-15)

    def test_limits(self, wire):
        assert ide(np.inf, wire) == 1.0
        assert ide(-np.inf, wire) == 0.0
        assert ide(1e6, wire) == pytest.approx(1.0, abs=1e-300)

    def test_one_sigma_above_inflection(self):
        p = WireParams(i_detect=10.5, sigma=0.5, i_switch=14.0, i_latch=15.0)
        assert ide(11.0, p) == pytest.approx(HALF_ERFC_MINUS_ONE, rel=1e-12)

    def test_vectorized(self, wire):
        grid = np.linspace(0.0, wire.i_switch, 64)
        vals = ide(grid, wire)
        assert vals.shape == grid.shape
        assert np.all((vals >= 0.0) & (vals <= 1.0))
        near = np.linspace(wire.i_detect - 3 * wire.sigma,
                           wire.i_detect + 3 * wire.sigma, 64)
        near_vals = ide(near, wire)
        assert np.all((near_vals > 0.0) & (near_vals < 1.0))

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_monotone_in_current(self, seed):
        rng = np.random.default_rng(seed)
        p = random_wire(rng)
        grid = np.sort(rng.uniform(0.0, 2.0 * p.i_switch, 200))
        vals = np.asarray(ide(grid, p))
        assert np.all(np.diff(vals) >= 0.0)


class TestRecoveryCurrent:
    def test_zero_at_zero(self, wire):
        assert recovery_current(0.0, wire) == 0.0

    def test_half_life(self, wire):
        t_half = wire.tau_reset * np.log(2.0)
        assert recovery_current(t_half, wire) == pytest.approx(wire.i_bias / 2.0, rel=1e-12)

    def test_one_tau(self):
        p = WireParams(l_kinetic=680.0, r_load=100.0)
        assert p.tau_reset == 6.8
        assert recovery_current(6.8, p) == pytest.approx(ONE_MINUS_INV_E * p.i_bias, rel=1e-12)

    def test_negative_rejected(self, wire):
        with pytest.raises(ValueError):
            recovery_current(-1.0, wire)
        with pytest.raises(ValueError):
            recovery_current(np.array([1.0, -0.5]), wire)

    def test_monotone_saturating(self, wire):
        t = np.linspace(0.0, 20.0 * wire.tau_reset, 512)
        i = np.asarray(recovery_current(t, wire))
        assert np.all(np.diff(i) > 0.0)
        assert i[-1] == pytest.approx(wire.i_bias, rel=1e-8)


class TestIdeVsDelay:
    def test_dead_at_zero(self, wire):
        assert ide_vs_delay(0.0, wire) == pytest.approx(float(ide(0.0, wire)), abs=1e-15)
        assert ide_vs_delay(0.0, wire) < 1e-12

    def test_saturates(self, wire):
        assert ide_vs_delay(1e6, wire) == pytest.approx(float(ide(wire.i_bias, wire)), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_monotone_in_delay(self, seed):
        rng = np.random.default_rng(seed)
        p = random_wire(rng)
        t = np.sort(rng.uniform(0.0, 20.0 * p.tau_reset, 200))
        vals = np.asarray(ide_vs_delay(t, p))
        assert np.all(np.diff(vals) >= 0.0)


class TestKineticInductance:
    def test_straight_wire(self):
        strip = MicrostripProfile.constant(194.0, 30.0, 120.0)
        lk = kinetic_inductance(strip)
        assert lk == pytest.approx(48.5, rel=1e-12)
        assert abs(lk - 50.0) / 50.0 < 0.05

    def test_additive_over_segments(self):
        full = MicrostripProfile.constant(194.0, 60.0, 120.0)
        half = MicrostripProfile.constant(194.0, 30.0, 120.0)
        assert kinetic_inductance(full) == pytest.approx(2.0 * kinetic_inductance(half), rel=1e-12)

    def test_halves_when_widths_double(self):
        rng = np.random.default_rng(5)
        s = np.cumsum(rng.uniform(0.5, 3.0, 40))
        w = rng.uniform(100.0, 1500.0, 40)
        base = MicrostripProfile(194.0, list(zip(s, w)))
        wide = MicrostripProfile(194.0, list(zip(s, 2.0 * w)))
        assert kinetic_inductance(wide) == pytest.approx(kinetic_inductance(base) / 2.0, rel=1e-12)

    def test_wire_plus_two_microstrips(self):
        # Linear taper 120 nm -> 1.5 um sized to ~315 nH each; together with
        # the 48.5 nH straight wire the chain lands near 680 nH.
        squares_needed = 315e3 / 194.0
        w1, w2 = 120.0, 1500.0
        length = squares_needed * (w2 - w1) / np.log(w2 / w1) * 1e-3  # um
        s = np.linspace(0.0, length, 4000)
        w = w1 + (w2 - w1) * s / length
        taper = MicrostripProfile(194.0, list(zip(s, w)))
        lk_taper = kinetic_inductance(taper)
        assert lk_taper == pytest.approx(315.0, rel=1e-3)
        wirelk = kinetic_inductance(MicrostripProfile.constant(194.0, 30.0, 120.0))
        total = wirelk + 2.0 * lk_taper
        assert total == pytest.approx(680.0, rel=0.01)

    def test_invalid_profiles(self):
        with pytest.raises(ValueError):
            MicrostripProfile(194.0, [(0.0, 120.0)])
        with pytest.raises(ValueError):
            MicrostripProfile(194.0, [(0.0, 120.0), (0.0, 120.0)])
        with pytest.raises(ValueError):
            MicrostripProfile(194.0, [(0.0, 120.0), (1.0, -5.0)])


class TestResetTime:
    def test_reference_values(self):
        assert reset_time(680.0, 100.0) == 6.8
        assert reset_time(100.0, 100.0) == 1.0
        assert reset_time(430.0, 100.0) == pytest.approx(4.3, rel=1e-12)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            reset_time(0.0, 100.0)
        with pytest.raises(ValueError):
            reset_time(680.0, -1.0)


def bisect_dead_time(p: WireParams, q: float) -> float:
    lo, hi = 0.0, p.tau_reset
    while float(ide_vs_delay(hi, p)) < q:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(ide_vs_delay(mid, p)) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestDeadTime:
    def test_worked_example(self):
        p = WireParams(i_detect=10.5, sigma=0.5, i_switch=14.0, i_latch=15.0,
                       bias_fraction=0.95)
        assert p.i_bias == pytest.approx(13.3)
        t = dead_time(p, 0.01)
        assert t == pytest.approx(8.84, abs=0.02)
        assert t == pytest.approx(bisect_dead_time(p, 0.01), abs=1e-3)

    def test_closed_form_matches_bisection(self):
        rng = np.random.default_rng(17)
        for _ in range(40):
            p = random_wire(rng)
            eta_max = float(ide(p.i_bias, p))
            q = rng.uniform(1e-4, 0.9) * eta_max
            t = dead_time(p, q)
            assert t == pytest.approx(bisect_dead_time(p, q), abs=1e-3)  # < 1 ps

    def test_scales_with_tau(self, wire):
        slow = WireParams(l_kinetic=2.0 * wire.l_kinetic)
        assert dead_time(slow, 0.01) == pytest.approx(2.0 * dead_time(wire, 0.01), rel=1e-12)

    def test_monotone_in_quantile(self, wire):
        qs = np.linspace(0.001, 0.95, 40) * float(ide(wire.i_bias, wire))
        ts = [dead_time(wire, q) for q in qs]
        assert np.all(np.diff(ts) > 0.0)

    def test_unreachable_quantile(self, wire):
        eta_max = float(ide(wire.i_bias, wire))
        with pytest.raises(ValueError):
            dead_time(wire, eta_max)
        with pytest.raises(ValueError):
            dead_time(wire, 0.0)

    def test_diverges_toward_saturation(self):
        # Needs a wire whose saturated efficiency is meaningfully below 1.
        p = WireParams(bias_fraction=0.7)
        eta_max = float(ide(p.i_bias, p))
        assert eta_max < 1.0
        assert dead_time(p, eta_max * (1.0 - 1e-9)) > 20.0 * p.tau_reset


class TestDarkCountRate:
    def test_background_only(self, wire):
        assert dark_count_rate(wire.i_bias, wire) == pytest.approx(0.4)
        assert dark_count_rate(0.0, wire) == pytest.approx(0.4)

    def test_exponential_doubling(self):
        p = WireParams(dcr_exp_amp=1e-3, dcr_exp_scale=0.8)
        i0 = 5.0
        r0 = float(dark_count_rate(i0, p)) - p.dcr_background
        r1 = float(dark_count_rate(i0 + p.dcr_exp_scale * np.log(2.0), p)) - p.dcr_background
        assert r1 == pytest.approx(2.0 * r0, rel=1e-12)

    def test_negative_bias_rejected(self, wire):
        with pytest.raises(ValueError):
            dark_count_rate(-1.0, wire)


class TestPlateauWidth:
    def test_reference_wire(self, wire):
        assert plateau_width(wire) == pytest.approx(2.8, abs=1e-12)

    def test_span_of_the_array(self):
        narrow = WireParams(i_detect=8.0, sigma=0.5, i_switch=9.2, i_latch=10.0)
        wide = WireParams(i_detect=8.0, sigma=0.5, i_switch=12.4, i_latch=13.0)
        assert plateau_width(narrow) == pytest.approx(0.7, abs=1e-12)
        assert plateau_width(wide) == pytest.approx(3.9, abs=1e-12)

    def test_zero(self):
        p = WireParams(i_detect=8.0, sigma=0.5, i_switch=8.5, i_latch=9.0)
        assert plateau_width(p) == 0.0

    def test_negative_warns(self):
        p = WireParams(i_detect=8.0, sigma=1.0, i_switch=8.5, i_latch=9.0)
        with pytest.warns(UserWarning, match="constricted"):
            width = plateau_width(p)
        assert width == pytest.approx(-0.5, abs=1e-12)


class TestWireParamsValidation:
    def test_derived_quantities(self, wire):
        assert wire.tau_reset == 6.8
        assert wire.i_bias == pytest.approx(0.95 * wire.i_switch)
        assert wire.rise_time == pytest.approx(wire.tau_reset / 50.0)
        assert wire.fall_time == wire.tau_reset

    def test_rejects_bad_ordering(self):
        with pytest.raises(ValueError):
            WireParams(i_detect=10.0, i_switch=9.0)
        with pytest.raises(ValueError):
            WireParams(sigma=-0.1)
        with pytest.raises(ValueError):
            WireParams(bias_fraction=1.5)
        with pytest.raises(ValueError):
            WireParams(tau_rise=5.0, tau_fall=1.0)
