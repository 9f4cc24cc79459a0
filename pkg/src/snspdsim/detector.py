"""Closed-form physics of a single superconducting nanowire.

Unit conventions used throughout the package: currents in uA, inductance in
nH (sheet inductance in pH/square), resistance in Ohm, model times in ns,
tag streams in integer ps, rates in counts/s, voltages in mV.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erfc, erfcinv

__all__ = [
    "WireParams",
    "MicrostripProfile",
    "ide",
    "recovery_current",
    "ide_vs_delay",
    "kinetic_inductance",
    "reset_time",
    "dead_time",
    "dark_count_rate",
    "plateau_width",
]


@dataclass(frozen=True)
class WireParams:
    """Electrical and detection parameters of one nanowire.

    The detection probability versus nanowire current is an erfc step with
    inflection point ``i_detect`` (uA) and width ``sigma`` (uA).
    ``i_switch`` is the current at which the wire goes normal, ``i_latch``
    the current above which the wire latches into a resistive state.  The
    operating point is ``i_bias = bias_fraction * i_switch``.

    ``l_kinetic`` (nH) and ``r_load`` (Ohm) set the current-recovery time
    constant ``tau_reset = l_kinetic / r_load`` (ns).  ``tau_rise`` and
    ``tau_fall`` are the rise/fall time constants of the readout voltage
    pulse; if left ``None`` they default to ``tau_reset / 50`` and
    ``tau_reset`` respectively (an ideal unfiltered readout).  A band-limited
    readout chain is emulated by setting ``tau_fall`` below ``tau_reset``.

    ``dcr_background`` is the bias-independent dark count floor (counts/s);
    ``dcr_exp_amp`` and ``dcr_exp_scale`` parameterise the exponential rise
    of the dark count rate with bias current.

    The default numbers describe a representative 120 nm wide wire biased at
    95% of its switching current with a 2.8 uA detection plateau; where the
    underlying device values are not published the defaults are plausible
    reconstructions (see the configuration notes in the README).
    """

    i_detect: float = 6.0
    sigma: float = 0.35
    i_switch: float = 9.15
    i_latch: float = 9.5
    bias_fraction: float = 0.95
    l_kinetic: float = 680.0
    r_load: float = 100.0
    pulse_amp_per_current: float = 57.5
    tau_rise: float | None = None
    tau_fall: float | None = None
    dcr_background: float = 0.4
    dcr_exp_amp: float = 0.0
    dcr_exp_scale: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.i_detect < self.i_switch:
            raise ValueError("require 0 < i_detect < i_switch")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.i_latch <= 0.0:
            raise ValueError("i_latch must be positive")
        if not 0.0 < self.bias_fraction <= 1.0:
            raise ValueError("bias_fraction must lie in (0, 1]")
        if self.l_kinetic <= 0.0 or self.r_load <= 0.0:
            raise ValueError("l_kinetic and r_load must be positive")
        if self.pulse_amp_per_current <= 0.0:
            raise ValueError("pulse_amp_per_current must be positive")
        if self.tau_rise is not None and self.tau_rise <= 0.0:
            raise ValueError("tau_rise must be positive")
        if self.tau_fall is not None and self.tau_fall <= 0.0:
            raise ValueError("tau_fall must be positive")
        if self.rise_time >= self.fall_time:
            raise ValueError("pulse rise time must be shorter than fall time")
        if self.dcr_background < 0.0 or self.dcr_exp_amp < 0.0:
            raise ValueError("dark count rate terms must be nonnegative")
        if self.dcr_exp_scale <= 0.0:
            raise ValueError("dcr_exp_scale must be positive")

    @property
    def tau_reset(self) -> float:
        """Current recovery time constant l_kinetic / r_load, in ns."""
        return self.l_kinetic / self.r_load

    @property
    def i_bias(self) -> float:
        """Operating bias current bias_fraction * i_switch, in uA."""
        return self.bias_fraction * self.i_switch

    @property
    def rise_time(self) -> float:
        """Pulse rise time constant in ns (defaults to tau_reset / 50)."""
        return self.tau_reset / 50.0 if self.tau_rise is None else self.tau_rise

    @property
    def fall_time(self) -> float:
        """Pulse fall time constant in ns (defaults to tau_reset)."""
        return self.tau_reset if self.tau_fall is None else self.tau_fall

    @property
    def pulse_amplitude(self) -> float:
        """Peak pulse amplitude of a fully recovered wire, in mV."""
        return self.pulse_amp_per_current * self.i_bias


@dataclass(frozen=True)
class MicrostripProfile:
    """Width profile of a superconducting microstrip (or nanowire) segment.

    ``sheet_inductance`` is in pH/square; ``width_samples`` is an ordered
    list of (arc length in um, width in nm) pairs with strictly increasing
    arc length and positive widths.
    """

    sheet_inductance: float
    width_samples: Sequence[tuple[float, float]]

    def __post_init__(self) -> None:
        samples = np.asarray(self.width_samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != 2 or samples.shape[0] < 2:
            raise ValueError("width_samples needs at least two (s, w) pairs")
        if self.sheet_inductance <= 0.0:
            raise ValueError("sheet_inductance must be positive")
        s, w = samples[:, 0], samples[:, 1]
        if np.any(np.diff(s) <= 0.0):
            raise ValueError("arc length samples must be strictly increasing")
        if np.any(w <= 0.0):
            raise ValueError("widths must be positive")
        object.__setattr__(self, "_arc_um", s)
        object.__setattr__(self, "_width_nm", w)

    @property
    def arc_um(self) -> np.ndarray:
        return self._arc_um

    @property
    def width_nm(self) -> np.ndarray:
        return self._width_nm

    @classmethod
    def constant(cls, sheet_inductance: float, length_um: float, width_nm: float) -> "MicrostripProfile":
        """Uniform-width strip of the given length."""
        return cls(sheet_inductance, [(0.0, width_nm), (length_um, width_nm)])


def ide(i_nanowire, p: WireParams):
    """Internal detection efficiency at the given nanowire current (uA).

    0.5 * erfc(-(i - i_detect) / sigma): an erfc step from 0 to 1, equal to
    0.5 at ``i_detect``.  Total function, monotone nondecreasing in current.
    Accepts scalars or arrays.
    """
    return 0.5 * erfc(-(np.asarray(i_nanowire, dtype=float) - p.i_detect) / p.sigma)


def recovery_current(t, p: WireParams):
    """Nanowire current (uA) at time t (ns) after a detection.

    i_bias * (1 - exp(-t / tau_reset)); zero at t = 0, approaching i_bias.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0):
        raise ValueError("delay must be nonnegative")
    return p.i_bias * -np.expm1(-t / p.tau_reset)


def ide_vs_delay(t, p: WireParams):
    """Detection efficiency at delay t (ns) since the previous detection."""
    return ide(recovery_current(t, p), p)


def kinetic_inductance(profile: MicrostripProfile) -> float:
    """Total kinetic inductance (nH) of a strip with varying width.

    Trapezoid quadrature of sheet_inductance / w(s) over the supplied
    samples; no resampling is performed, so the sample density controls the
    accuracy for curved profiles.  Additive over concatenated segments.
    """
    squares = np.trapezoid(1.0 / profile.width_nm, profile.arc_um * 1e3)
    return float(profile.sheet_inductance * squares * 1e-3)


def reset_time(l_k: float, r_load: float) -> float:
    """Current recovery time constant (ns) of inductance l_k (nH) into r_load (Ohm)."""
    if l_k <= 0.0 or r_load <= 0.0:
        raise ValueError("l_k and r_load must be positive")
    return l_k / r_load


def _dead_time_bisect(p: WireParams, eta_quantile: float) -> float:
    # Bracketing fallback; [0, t_hi] with t_hi grown until the efficiency
    # exceeds the quantile.
    t_hi = p.tau_reset
    while float(ide_vs_delay(t_hi, p)) < eta_quantile:
        t_hi *= 2.0
        if t_hi > 1e6 * p.tau_reset:
            raise ValueError("eta_quantile unreachable")
    t_lo = 0.0
    for _ in range(200):
        mid = 0.5 * (t_lo + t_hi)
        if float(ide_vs_delay(mid, p)) < eta_quantile:
            t_lo = mid
        else:
            t_hi = mid
    return 0.5 * (t_lo + t_hi)


def dead_time(p: WireParams, eta_quantile: float) -> float:
    """Smallest delay t (ns) at which ide_vs_delay(t) reaches eta_quantile.

    Closed form t = -tau_reset * ln(1 - i_q / i_bias) with
    i_q = i_detect - sigma * erfcinv(2 * eta_quantile); falls back to
    bisection if the closed form is numerically unusable.  Raises if the
    quantile is not reachable at the operating bias.
    """
    eta_max = float(ide(p.i_bias, p))
    if not 0.0 < eta_quantile < eta_max:
        raise ValueError(
            f"eta_quantile {eta_quantile:g} not reachable: ide(i_bias) = {eta_max:g}"
        )
    i_q = p.i_detect - p.sigma * float(erfcinv(2.0 * eta_quantile))
    if i_q <= 0.0:
        return 0.0
    t = -p.tau_reset * np.log1p(-i_q / p.i_bias)
    if not np.isfinite(t) or t < 0.0:
        return _dead_time_bisect(p, eta_quantile)
    return float(t)


def dark_count_rate(i_bias, p: WireParams):
    """Dark count rate (counts/s) at the given bias: floor plus exponential rise."""
    i_bias = np.asarray(i_bias, dtype=float)
    if np.any(i_bias < 0.0):
        raise ValueError("i_bias must be nonnegative")
    return p.dcr_background + p.dcr_exp_amp * np.exp(i_bias / p.dcr_exp_scale)


def plateau_width(p: WireParams) -> float:
    """Detection plateau i_switch - (i_detect + sigma), in uA.

    May be negative for constricted wires; reported as-is with a warning.
    """
    width = p.i_switch - (p.i_detect + p.sigma)
    if width < 0.0:
        warnings.warn(
            f"negative detection plateau ({width:.3g} uA): constricted wire",
            stacklevel=2,
        )
    return width
