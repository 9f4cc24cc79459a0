import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snspdsim.optics import (
    ArrayGeometry,
    CouplingProfile,
    GaussianMode,
    coupling_profile,
    misalignment_penalty,
    sde,
    slab_fraction,
    wire_positions,
)

REFERENCE_GEOMETRY = ArrayGeometry(n_wires=32, pitch=400.0, wire_width=120.0, wire_length=30.0)
REFERENCE_MODE = GaussianMode(mode_field_diameter=10.4, offset=-0.76)
# Tuned so the reference profile totals 78% at the reference offset.
REFERENCE_OPTICAL_EFFICIENCY = 0.7943


class TestSlabFraction:
    def test_full_line(self):
        assert slab_fraction(-np.inf, np.inf, GaussianMode()) == pytest.approx(1.0, abs=1e-15)

    def test_array_window_power(self):
        # 32 wires at 400 nm pitch cover +-6.4 um.
        frac = slab_fraction(-6.4, 6.4, GaussianMode(10.4, 0.0))
        assert frac == pytest.approx(0.986, abs=1e-3)

    def test_symmetry(self):
        mode = GaussianMode(10.4, 0.0)
        assert slab_fraction(-3.0, 0.0, mode) == pytest.approx(slab_fraction(0.0, 3.0, mode), rel=1e-14)

    def test_requires_ordered_bounds(self):
        with pytest.raises(ValueError):
            slab_fraction(1.0, 1.0, GaussianMode())

    @settings(max_examples=100, deadline=None)
    @given(
        a=st.floats(-20, 20), b=st.floats(-20, 20), c=st.floats(-20, 20),
        offset=st.floats(-3, 3), mfd=st.floats(2.0, 30.0),
    )
    def test_additive(self, a, b, c, offset, mfd):
        x1, x2, x3 = sorted((a, b, c))
        if x1 == x2 or x2 == x3:
            return
        mode = GaussianMode(mfd, offset)
        lhs = slab_fraction(x1, x2, mode) + slab_fraction(x2, x3, mode)
        assert lhs == pytest.approx(slab_fraction(x1, x3, mode), abs=1e-12)

    def test_translation_invariance(self):
        mode0 = GaussianMode(10.4, 0.3)
        mode1 = GaussianMode(10.4, 0.3 + 1.7)
        assert slab_fraction(-2.0 + 1.7, 2.0 + 1.7, mode1) == pytest.approx(
            slab_fraction(-2.0, 2.0, mode0), rel=1e-14)


class TestCouplingProfile:
    def test_single_wide_cell(self):
        geom = ArrayGeometry(n_wires=1, pitch=100000.0, wire_width=120.0)
        prof = coupling_profile(geom, GaussianMode(10.4, 0.0), 1.0)
        assert prof.per_wire[0] == pytest.approx(1.0, abs=1e-12)
        assert prof.uncoupled == pytest.approx(0.0, abs=1e-12)

    def test_reference_array_sde(self):
        prof = coupling_profile(REFERENCE_GEOMETRY, REFERENCE_MODE, REFERENCE_OPTICAL_EFFICIENCY)
        assert sde(prof) == pytest.approx(0.78, abs=2e-3)
        assert prof.per_wire.sum() + prof.uncoupled == pytest.approx(1.0, abs=1e-12)

    def test_mirror_symmetry(self):
        mode_pos = GaussianMode(10.4, 0.9)
        mode_neg = GaussianMode(10.4, -0.9)
        a = coupling_profile(REFERENCE_GEOMETRY, mode_pos, 0.8).per_wire
        b = coupling_profile(REFERENCE_GEOMETRY, mode_neg, 0.8).per_wire
        assert np.allclose(a, b[::-1], atol=1e-14)

    def test_envelope_peaks_at_mode_center(self):
        prof = coupling_profile(REFERENCE_GEOMETRY, REFERENCE_MODE, REFERENCE_OPTICAL_EFFICIENCY)
        peak_wire = int(np.argmax(prof.per_wire))
        centers = wire_positions(REFERENCE_GEOMETRY)
        assert abs(centers[peak_wire] - REFERENCE_MODE.offset) <= REFERENCE_GEOMETRY.pitch * 1e-3

    def test_sum_bounded_by_optical_efficiency(self):
        for offset in (-1.5, 0.0, 2.0):
            prof = coupling_profile(REFERENCE_GEOMETRY, GaussianMode(10.4, offset), 0.9)
            assert sde(prof) <= 0.9 + 1e-12

    def test_wide_array_collects_everything(self):
        geom = ArrayGeometry(n_wires=200, pitch=400.0, wire_width=120.0)
        prof = coupling_profile(geom, GaussianMode(10.4, 0.0), 0.9)
        assert sde(prof) == pytest.approx(0.9, abs=1e-6)

    def test_validation(self):
        with pytest.raises(ValueError):
            coupling_profile(REFERENCE_GEOMETRY, REFERENCE_MODE, 0.0)
        with pytest.raises(ValueError):
            CouplingProfile(per_wire=np.array([0.5, 0.2]), uncoupled=0.5)
        with pytest.raises(ValueError):
            CouplingProfile(per_wire=np.array([-0.1, 0.2]), uncoupled=0.9)


class TestSde:
    def test_zero_profile(self):
        prof = CouplingProfile(per_wire=np.zeros(4), uncoupled=1.0)
        assert sde(prof) == 0.0

    def test_reference(self):
        prof = coupling_profile(REFERENCE_GEOMETRY, REFERENCE_MODE, REFERENCE_OPTICAL_EFFICIENCY)
        assert sde(prof) == pytest.approx(0.78, abs=2e-3)


class TestMisalignmentPenalty:
    def test_zero_offset(self):
        assert misalignment_penalty(REFERENCE_GEOMETRY, REFERENCE_MODE, REFERENCE_OPTICAL_EFFICIENCY, 0.0) == 0.0

    def test_reference_tolerance(self):
        penalty = misalignment_penalty(REFERENCE_GEOMETRY, REFERENCE_MODE,
                                       REFERENCE_OPTICAL_EFFICIENCY, 1.5)
        assert 0.0 < penalty <= 0.017

    def test_monotone_in_max_offset(self):
        penalties = [
            misalignment_penalty(REFERENCE_GEOMETRY, REFERENCE_MODE, REFERENCE_OPTICAL_EFFICIENCY, m)
            for m in (0.0, 0.5, 1.0, 1.5, 2.0)
        ]
        assert np.all(np.diff(penalties) >= 0.0)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            misalignment_penalty(REFERENCE_GEOMETRY, REFERENCE_MODE, 0.8, -1.0)
