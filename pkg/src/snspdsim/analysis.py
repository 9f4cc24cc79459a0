"""Tag-stream analysis: histograms, rate curves, jitter metrics.

Covers the measurement pipeline around the simulator: inter-arrival
histograms and reset-time extraction, detection-efficiency curve fits,
renewal-theory efficiency-versus-rate curves with the 3 dB maximum count
rate, jitter histograms with width-at-fraction metrics, and composition of
array jitter from per-rate instrument response functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.integrate import cumulative_trapezoid, quad
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq, curve_fit
from scipy.special import erfc

from .detector import WireParams, dead_time, ide, ide_vs_delay
from .engine import TagStream, TruthStream

__all__ = [
    "AnalysisError",
    "Histogram",
    "RateCurve",
    "histogram_from_samples",
    "interarrival_histogram",
    "fit_reset_time",
    "fit_ide_curve",
    "efficiency_vs_rate",
    "array_rate_curve",
    "wire_rates_at_array_rate",
    "mcr_3db",
    "pair_truth_photon_times",
    "sync_residuals",
    "jitter_histogram",
    "width_at_fraction",
    "compose_array_jitter",
]


class AnalysisError(RuntimeError):
    """Raised when an analysis cannot produce a meaningful result."""


@dataclass
class Histogram:
    """Binned counts over time (ps): ``len(counts) == len(bin_edges) - 1``.

    Counts are integers for raw histograms; composed or analytic histograms
    may carry float weights.
    """

    bin_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self) -> None:
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts)
        if self.bin_edges.size != self.counts.size + 1:
            raise ValueError("need len(counts) == len(bin_edges) - 1")
        if np.any(np.diff(self.bin_edges) <= 0.0):
            raise ValueError("bin edges must be strictly increasing")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    @property
    def bin_widths(self) -> np.ndarray:
        return np.diff(self.bin_edges)

    @property
    def total(self):
        return self.counts.sum()


@dataclass
class RateCurve:
    """Efficiency versus count rate for one wire or the whole array.

    ``relative_efficiency`` is normalized to the saturated low-rate
    efficiency (``normalization`` records the convention).
    """

    incident_rate: np.ndarray
    measured_rate: np.ndarray
    relative_efficiency: np.ndarray
    normalization: str = "eta_inf"

    def __post_init__(self) -> None:
        self.incident_rate = np.asarray(self.incident_rate, dtype=np.float64)
        self.measured_rate = np.asarray(self.measured_rate, dtype=np.float64)
        self.relative_efficiency = np.asarray(self.relative_efficiency, dtype=np.float64)
        if not (self.incident_rate.size == self.measured_rate.size
                == self.relative_efficiency.size):
            raise ValueError("rate curve arrays must have matching sizes")

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.incident_rate.tolist(),
                        self.measured_rate.tolist(),
                        self.relative_efficiency.tolist()))


def histogram_from_samples(samples, bin_width: float, lo: float | None = None,
                           hi: float | None = None) -> Histogram:
    """Uniform-bin histogram with edges aligned to multiples of bin_width."""
    if bin_width <= 0.0:
        raise ValueError("bin_width must be positive")
    samples = np.asarray(samples, dtype=np.float64)
    samples = samples[np.isfinite(samples)]
    if samples.size == 0:
        return Histogram(np.array([0.0, bin_width]), np.zeros(1, np.int64))
    if lo is None:
        lo = np.floor(samples.min() / bin_width) * bin_width
    if hi is None:
        hi = (np.floor(samples.max() / bin_width) + 1.0) * bin_width
    n_bins = max(1, int(np.round((hi - lo) / bin_width)))
    edges = lo + np.arange(n_bins + 1) * bin_width
    counts, _ = np.histogram(samples, bins=edges)
    return Histogram(edges, counts.astype(np.int64))


def interarrival_histogram(tags: TagStream, channel: int, bin_width: float) -> Histogram:
    """Histogram of successive same-channel tag time differences (ps)."""
    times = tags.time[tags.channel == channel]
    dts = np.diff(times).astype(np.float64)
    if dts.size == 0:
        return Histogram(np.array([0.0, bin_width]), np.zeros(1, np.int64))
    return histogram_from_samples(dts, bin_width, lo=0.0)


def fit_reset_time(hist: Histogram, p: WireParams) -> tuple[float, float]:
    """Extract the recovery time constant from an inter-arrival histogram.

    Least-squares fit of a * ide_vs_delay(t; tau) to the low-delay region
    (t below five times the initial guess ``p.tau_reset``), with the scale
    and tau free.  Returns (tau_ns, normalized residual).  Refuses if the
    rising edge holds fewer than 1000 counts.
    """
    t_ns = hist.centers * 1e-3
    window = t_ns < 5.0 * p.tau_reset
    counts = np.asarray(hist.counts, dtype=np.float64)[window]
    t_fit = t_ns[window]
    if counts.sum() < 1000:
        raise AnalysisError(
            f"insufficient counts in the rising edge ({int(counts.sum())} < 1000); "
            "need more data below 5 * tau_reset"
        )

    def model(t, a, tau):
        i = p.i_bias * -np.expm1(-t / tau)
        return a * 0.5 * erfc(-(i - p.i_detect) / p.sigma)

    a0 = float(counts.max()) if counts.max() > 0 else 1.0
    popt, _ = curve_fit(
        model, t_fit, counts, p0=[a0, p.tau_reset],
        bounds=([0.0, 1e-6], [np.inf, np.inf]), maxfev=10000,
    )
    resid = model(t_fit, *popt) - counts
    norm = np.linalg.norm(counts)
    residual = float(np.linalg.norm(resid) / norm) if norm > 0 else 0.0
    return float(popt[1]), residual


def fit_ide_curve(pcr, p_init: WireParams) -> tuple[float, float]:
    """Fit the detection-efficiency step to count rate versus bias data.

    ``pcr`` is a sequence of (i_bias, counts) pairs; the model is a scaled
    erfc step with free amplitude.  Returns the fitted (i_detect, sigma).
    """
    arr = np.asarray(pcr, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 4:
        raise ValueError("pcr must be a list of (i_bias, counts) with >= 4 points")
    i, c = arr[:, 0], arr[:, 1]

    def model(x, a, i_detect, sigma):
        return a * 0.5 * erfc(-(x - i_detect) / sigma)

    a0 = float(c.max()) if c.max() > 0 else 1.0
    popt, _ = curve_fit(
        model, i, c, p0=[a0, p_init.i_detect, p_init.sigma],
        bounds=([0.0, 0.0, 1e-9], [np.inf, np.inf, np.inf]), maxfev=10000,
    )
    return float(popt[1]), float(popt[2])


class _RenewalModel:
    """Mean inter-detection time of one wire under CW illumination.

    After a detection the probability of surviving to delay t without a new
    detection is exp(-lam * H(t)) with H the integral of the recovering
    efficiency; the measured rate is the reciprocal of the mean gap
    integral(survival).  H is precomputed on a dense grid and interpolated;
    the tail beyond the grid is analytic because the efficiency has
    saturated there.
    """

    def __init__(self, p: WireParams, grid_points: int = 1 << 16,
                 t_max_factor: float = 60.0):
        self.eta_inf = float(ide(p.i_bias, p))
        if self.eta_inf <= 0.0:
            raise AnalysisError("saturated efficiency is zero: rate integral diverges")
        self.t_max = t_max_factor * p.tau_reset
        grid = np.linspace(0.0, self.t_max, grid_points)
        eta = ide_vs_delay(grid, p)
        h = cumulative_trapezoid(eta, grid, initial=0.0)
        self._h = PchipInterpolator(grid, h)
        self._h_end = float(h[-1])
        # Quadrature hint near the start of the recovery.
        try:
            self._t_knee = dead_time(p, 0.5 * self.eta_inf)
        except ValueError:
            self._t_knee = p.tau_reset

    def mean_gap_s(self, incident_rate: float) -> float:
        if incident_rate <= 0.0:
            raise ValueError("incident rate must be positive")
        lam = incident_rate * 1e-9  # photons per ns
        body, _ = quad(
            lambda t: np.exp(-lam * self._h(t)), 0.0, self.t_max,
            points=[self._t_knee], limit=200, epsabs=0.0, epsrel=1e-6,
        )
        tail = np.exp(-lam * self._h_end) / (lam * self.eta_inf)
        return (body + tail) * 1e-9

    def measured_rate(self, incident_rate: float) -> float:
        return 1.0 / self.mean_gap_s(incident_rate)


def efficiency_vs_rate(p: WireParams, incident_rates) -> RateCurve:
    """Renewal-theory efficiency versus rate for one wire.

    ``incident_rates`` are absorbed-photon rates offered to the wire
    (photons/s).  ``relative_efficiency = measured / (rate * eta_inf)``
    approaches 1 at low rates.
    """
    rates = np.asarray(incident_rates, dtype=np.float64)
    model = _RenewalModel(p)
    measured = np.array([model.measured_rate(r) for r in rates])
    rel = measured / (rates * model.eta_inf)
    return RateCurve(rates, measured, rel, normalization="eta_inf")


def array_rate_curve(params, profile, incident_rates) -> RateCurve:
    """Renewal efficiency versus rate for the array behind a coupling profile.

    ``incident_rates`` are photon rates at the fiber input; wire k sees
    ``rate * profile.per_wire[k]`` and the wires saturate independently.
    """
    rates = np.asarray(incident_rates, dtype=np.float64)
    n = profile.n_wires
    params_list = list(params) if isinstance(params, (list, tuple)) else [params] * n
    if len(params_list) != n:
        raise ValueError("need one WireParams per wire")
    models: dict[WireParams, _RenewalModel] = {}
    for q in params_list:
        if q not in models:
            models[q] = _RenewalModel(q)
    denom = sum(float(pk) * models[q].eta_inf
                for pk, q in zip(profile.per_wire, params_list))
    measured = np.zeros_like(rates)
    for j, lam in enumerate(rates):
        measured[j] = sum(
            models[q].measured_rate(lam * pk)
            for pk, q in zip(profile.per_wire, params_list) if pk > 0.0
        )
    rel = measured / (rates * denom)
    return RateCurve(rates, measured, rel, normalization="eta_inf")


def wire_rates_at_array_rate(params, profile, array_measured_rate: float) -> np.ndarray:
    """Per-wire measured rates when the array total is ``array_measured_rate``.

    Inverts the summed renewal curves for the fiber-input rate, then
    evaluates each wire at its share of the mode.
    """
    n = profile.n_wires
    params_list = list(params) if isinstance(params, (list, tuple)) else [params] * n
    models: dict[WireParams, _RenewalModel] = {}
    for q in params_list:
        if q not in models:
            models[q] = _RenewalModel(q)

    def total(lam_fiber: float) -> float:
        return sum(models[q].measured_rate(lam_fiber * pk)
                   for pk, q in zip(profile.per_wire, params_list) if pk > 0.0)

    lo, hi = 1e3, 1e12
    while total(hi) < array_measured_rate:
        hi *= 10.0
        if hi > 1e18:
            raise AnalysisError("array rate not reachable")
    lam = brentq(lambda x: total(x) - array_measured_rate, lo, hi, rtol=1e-9)
    return np.array([
        models[q].measured_rate(lam * pk) if pk > 0.0 else 0.0
        for pk, q in zip(profile.per_wire, params_list)
    ])


def mcr_3db(curve: RateCurve) -> float:
    """Measured rate at which the relative efficiency crosses 0.5.

    Linear interpolation between the bracketing points of the supplied
    curve; raises if the curve never crosses (reporting the highest rate
    reached) or is already compressed at its lowest point.
    """
    rel = curve.relative_efficiency
    meas = curve.measured_rate
    if rel.size < 2:
        raise AnalysisError("need at least two points to locate the 3 dB rate")
    if rel[0] < 0.5:
        raise AnalysisError("curve is already below 0.5 at the lowest rate")
    below = np.flatnonzero(rel < 0.5)
    if below.size == 0:
        raise AnalysisError(
            f"relative efficiency never crosses 0.5 (max measured rate "
            f"{meas.max():.4g} counts/s)"
        )
    j = int(below[0])
    x0, x1 = meas[j - 1], meas[j]
    y0, y1 = rel[j - 1], rel[j]
    return float(x0 + (0.5 - y0) * (x1 - x0) / (y1 - y0))


def pair_truth_photon_times(tags: TagStream, truth: TruthStream) -> np.ndarray:
    """True photon times aligned with the tag stream (NaN where unmatched).

    Pairing is positional per channel: the i-th tag on a channel is matched
    with the i-th tagged detection of that channel.  This stays valid for
    walk-corrected streams as long as corrections do not reorder tags
    within a channel (gaps are far larger than any correction).
    """
    ref = np.full(len(tags), np.nan)
    for ch in np.unique(tags.channel):
        idx = np.flatnonzero(tags.channel == ch)
        det = truth.tagged & (truth.channel == ch)
        photon = truth.photon_time[det]
        k = min(idx.size, photon.size)
        ref[idx[:k]] = photon[:k]
    return ref


def sync_residuals(times, period_ps: float) -> np.ndarray:
    """Residuals against the nearest sync epoch: fold into [-P/2, P/2)."""
    if period_ps <= 0.0:
        raise ValueError("period must be positive")
    t = np.asarray(times, dtype=np.float64)
    return (t + 0.5 * period_ps) % period_ps - 0.5 * period_ps


def jitter_histogram(
    tags: TagStream,
    reference: str,
    bin_width: float,
    *,
    truth: TruthStream | None = None,
    rep_rate: float | None = None,
    channel: int | None = None,
) -> Histogram:
    """Histogram of tag time minus reference time (ps).

    ``reference`` is "truth" (per-tag true photon times from the ground
    truth sidecar) or "sync" (nearest epoch of a periodic source at
    ``rep_rate``).
    """
    if channel is not None:
        mask = tags.channel == channel
        tags = TagStream(tags.time[mask], tags.channel[mask], tags.flags[mask])
    if reference == "truth":
        if truth is None:
            raise ValueError("reference='truth' requires the truth stream")
        residuals = tags.time.astype(np.float64) - pair_truth_photon_times(tags, truth)
    elif reference == "sync":
        if rep_rate is None or rep_rate <= 0.0:
            raise ValueError("reference='sync' requires a positive rep_rate")
        residuals = sync_residuals(tags.time, 1e12 / rep_rate)
    else:
        raise ValueError("reference must be 'truth' or 'sync'")
    return histogram_from_samples(residuals, bin_width)


def width_at_fraction(hist: Histogram, fraction: float, *, smooth: bool = False) -> float:
    """Full width of the histogram at ``fraction`` of its maximum (ps).

    Outermost crossings of fraction * peak, linearly interpolated on bin
    centers; the boundary bins clamp to the histogram edges.  A histogram
    with a single occupied bin reports that bin's width.  ``smooth`` applies
    a 3-bin moving average before measuring.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    counts = np.asarray(hist.counts, dtype=np.float64)
    if counts.size == 0 or counts.sum() <= 0:
        raise AnalysisError("empty histogram")
    if smooth and counts.size >= 3:
        counts = np.convolve(counts, np.full(3, 1.0 / 3.0), mode="same")
    occupied = np.flatnonzero(counts > 0)
    if occupied.size == 1:
        j = int(occupied[0])
        return float(hist.bin_edges[j + 1] - hist.bin_edges[j])
    centers = hist.centers
    level = fraction * counts.max()
    above = counts >= level
    i0 = int(np.argmax(above))
    i1 = int(counts.size - 1 - np.argmax(above[::-1]))
    if i0 == 0:
        x_left = float(hist.bin_edges[0])
    else:
        y0, y1 = counts[i0 - 1], counts[i0]
        x_left = float(centers[i0 - 1] + (level - y0) * (centers[i0] - centers[i0 - 1]) / (y1 - y0))
    if i1 == counts.size - 1:
        x_right = float(hist.bin_edges[-1])
    else:
        y0, y1 = counts[i1], counts[i1 + 1]
        x_right = float(centers[i1] + (y0 - level) * (centers[i1 + 1] - centers[i1]) / (y0 - y1))
    return x_right - x_left


def compose_array_jitter(rate_distribution, irf_library: Mapping[float, Histogram]) -> Histogram:
    """Array jitter histogram composed from per-rate single-wire IRFs.

    Each wire contributes the library IRF nearest to its rate (nearest in
    log rate), weighted by the wire's share of total counts.  All library
    histograms must share identical binning.
    """
    rates = np.asarray(rate_distribution, dtype=np.float64)
    if np.any(rates < 0.0):
        raise ValueError("rates must be nonnegative")
    total = rates.sum()
    if total <= 0.0:
        raise AnalysisError("all wire rates are zero")
    if not irf_library:
        raise ValueError("irf_library is empty")
    keys = np.array(sorted(irf_library))
    if np.any(keys <= 0.0):
        raise ValueError("library rates must be positive")
    ref_edges = np.asarray(next(iter(irf_library.values())).bin_edges)
    for h in irf_library.values():
        if not np.array_equal(np.asarray(h.bin_edges), ref_edges):
            raise AnalysisError("library IRFs must share identical bin edges")
    out = np.zeros(ref_edges.size - 1, dtype=np.float64)
    log_keys = np.log(keys)
    for r in rates:
        if r <= 0.0:
            continue
        k = keys[int(np.argmin(np.abs(log_keys - np.log(r))))]
        out += (r / total) * np.asarray(irf_library[float(k)].counts, dtype=np.float64)
    return Histogram(ref_edges.copy(), out)
