"""Time-walk calibration and correction for tag streams.

Constant-threshold discrimination makes the tag delay depend
deterministically on the recovery state of the wire, i.e. on the gap(s) to
the preceding detection(s).  The calibration bins tags by those gaps
(log-spaced), estimates the mean timing offset per bin relative to isolated
tags, and the correction subtracts the tabulated offset in one streaming
pass with constant memory per channel.  Corrections are always looked up
from *uncorrected* predecessor gaps, matching real-time operation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .analysis import sync_residuals
from .detector import WireParams, dead_time
from .engine import TagStream

__all__ = [
    "CalibrationError",
    "WalkConfig",
    "WalkCalibration",
    "default_walk_config",
    "calibrate",
    "apply",
    "apply_chunked",
]


class CalibrationError(RuntimeError):
    """Raised when a walk calibration cannot be established."""


@dataclass(frozen=True)
class WalkConfig:
    """Binning and statistics settings for walk calibration.

    Gaps are binned on ``n_bins`` log-spaced bins spanning
    [``dt_min``, ``dt_max``] ps; bins holding fewer than ``min_count``
    samples inherit the nearest filled neighbor.  Tags with a gap above
    ``isolation_cutoff`` (default ``dt_max``) define the zero-walk
    baseline.
    """

    dt_min: float
    dt_max: float
    n_bins: int = 64
    min_count: int = 100
    isolation_cutoff: float | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.dt_min < self.dt_max:
            raise ValueError("require 0 < dt_min < dt_max")
        if self.n_bins < 1:
            raise ValueError("n_bins must be positive")
        if self.min_count < 1:
            raise ValueError("min_count must be positive")
        if self.isolation_cutoff is not None and self.isolation_cutoff < self.dt_max:
            raise ValueError("isolation_cutoff must not be below dt_max")

    @property
    def cutoff(self) -> float:
        return self.dt_max if self.isolation_cutoff is None else self.isolation_cutoff

    def edges(self) -> np.ndarray:
        return np.geomspace(self.dt_min, self.dt_max, self.n_bins + 1)


def default_walk_config(p: WireParams, **overrides) -> WalkConfig:
    """Binning derived from the wire: [dead_time/2, 10 * tau_reset].

    The lower edge uses the 1%-efficiency dead time, where the walk varies
    fastest; the upper edge and isolation cutoff sit where recovery is
    complete.
    """
    dt_min = 0.5 * dead_time(p, 0.01) * 1e3
    dt_max = 10.0 * p.tau_reset * 1e3
    kwargs = dict(dt_min=dt_min, dt_max=dt_max)
    kwargs.update(overrides)
    return WalkConfig(**kwargs)


@dataclass
class WalkCalibration:
    """Lookup from predecessor gap(s) to the mean timing offset (ps).

    ``correction`` is 1-D over the gap to the previous tag for order 1, or
    2-D over (gap to previous, gap to second previous) for order 2; order-2
    calibrations keep the 1-D table as a fallback for sparse cells and for
    tags whose second predecessor lies beyond the binning range.  The
    correction is zero beyond the largest edge and for tags without enough
    history.  ``baseline`` is the mean residual of isolated tags that the
    table is referenced to.
    """

    order: int
    dt_bin_edges: np.ndarray
    correction: np.ndarray
    counts: np.ndarray
    baseline: float
    correction_1d: np.ndarray
    counts_1d: np.ndarray
    isolation_cutoff: float
    min_count: int

    def __post_init__(self) -> None:
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        self.dt_bin_edges = np.asarray(self.dt_bin_edges, dtype=np.float64)
        self.correction = np.asarray(self.correction, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.correction_1d = np.asarray(self.correction_1d, dtype=np.float64)
        self.counts_1d = np.asarray(self.counts_1d, dtype=np.int64)
        nb = self.dt_bin_edges.size - 1
        want = (nb,) if self.order == 1 else (nb, nb)
        if self.correction.shape != want or self.counts.shape != want:
            raise ValueError("correction/counts shape does not match the bin edges")
        if not np.all(np.isfinite(self.correction)):
            raise ValueError("corrections must be finite")

    @property
    def n_bins(self) -> int:
        return self.dt_bin_edges.size - 1

    def bin_index(self, dt) -> np.ndarray:
        """Bin index for gaps (ps); gaps below the first edge clamp to bin 0."""
        dt = np.asarray(dt, dtype=np.float64)
        idx = np.searchsorted(self.dt_bin_edges, dt, side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def lookup(self, dt1, dt2=None) -> np.ndarray:
        """Correction (ps) for gaps dt1 (and dt2 for order 2); NaN marks
        missing history and yields zero."""
        dt1 = np.asarray(dt1, dtype=np.float64)
        out = np.zeros(dt1.shape, dtype=np.float64)
        top = self.dt_bin_edges[-1]
        in1 = np.isfinite(dt1) & (dt1 <= top)
        b1 = self.bin_index(np.where(in1, dt1, self.dt_bin_edges[0]))
        if self.order == 1:
            out[in1] = self.correction[b1[in1]]
            return out
        if dt2 is None:
            raise ValueError("order-2 calibration requires dt2")
        dt2 = np.asarray(dt2, dtype=np.float64)
        has2 = np.isfinite(dt2)
        joint = in1 & has2 & (dt2 <= top)
        far2 = in1 & has2 & (dt2 > top)
        b2 = self.bin_index(np.where(joint, dt2, self.dt_bin_edges[0]))
        out[joint] = self.correction[b1[joint], b2[joint]]
        out[far2] = self.correction_1d[b1[far2]]
        return out


def _all_channel_gaps(tags: TagStream) -> tuple[np.ndarray, np.ndarray]:
    """Per-tag gaps to the previous one/two same-channel tags, in tag order.

    One stable sort by channel groups the stream without per-channel scans;
    within-channel time order is preserved from the input.
    """
    n = len(tags)
    if n == 0:
        return np.empty(0), np.empty(0)
    order = np.argsort(tags.channel, kind="stable")
    t = tags.time.astype(np.float64)[order]
    ch = tags.channel[order]
    g1 = np.full(n, np.nan)
    g2 = np.full(n, np.nan)
    g1[1:] = t[1:] - t[:-1]
    if n > 2:
        g2[2:] = t[2:] - t[:-2]
    run_start = np.zeros(n, dtype=bool)
    run_start[0] = True
    run_start[1:] = ch[1:] != ch[:-1]
    g1[run_start] = np.nan
    second = np.flatnonzero(run_start) + 1
    second = second[second < n]
    second = second[~run_start[second]]
    g2[run_start] = np.nan
    g2[second] = np.nan
    dt1 = np.empty(n)
    dt2 = np.empty(n)
    dt1[order] = g1
    dt2[order] = g2
    return dt1, dt2


def _inherit_nearest(values: np.ndarray, filled: np.ndarray) -> np.ndarray:
    # Unfilled bins take the value of the nearest filled bin (ties toward
    # lower index).  All-empty tables stay zero.
    out = np.zeros_like(values)
    idx = np.flatnonzero(filled)
    if idx.size == 0:
        return out
    pos = np.arange(values.size)
    j = np.searchsorted(idx, pos)
    left = idx[np.clip(j - 1, 0, idx.size - 1)]
    right = idx[np.clip(j, 0, idx.size - 1)]
    pick = np.where(np.abs(pos - left) <= np.abs(right - pos), left, right)
    out[:] = values[pick]
    return out


def calibrate(
    tags: TagStream,
    *,
    reference_times: np.ndarray | None = None,
    sync_period_ps: float | None = None,
    order: int = 1,
    config: WalkConfig,
) -> WalkCalibration:
    """Build a walk calibration from a tag stream and a timing reference.

    ``reference_times`` is an array of per-tag reference times (ps, NaN for
    tags without a reference, e.g. cross-talk); alternatively
    ``sync_period_ps`` folds the tags onto a periodic sync.  The correction
    for a bin is the mean residual of its tags minus the mean residual of
    isolated tags (gap above the isolation cutoff).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if (reference_times is None) == (sync_period_ps is None):
        raise ValueError("provide exactly one of reference_times or sync_period_ps")
    if reference_times is not None:
        reference_times = np.asarray(reference_times, dtype=np.float64)
        if reference_times.size != len(tags):
            raise ValueError("reference_times must align with the tag stream")
        residual = tags.time.astype(np.float64) - reference_times
    else:
        residual = sync_residuals(tags.time, float(sync_period_ps))

    nb = config.n_bins
    edges = config.edges()
    dt1, dt2 = _all_channel_gaps(tags)

    valid = np.isfinite(residual)
    isolated = valid & (dt1 > config.cutoff)
    n_iso = int(np.count_nonzero(isolated))
    if n_iso < config.min_count:
        raise CalibrationError(
            f"cannot establish baseline: {n_iso} isolated tags "
            f"(gap > {config.cutoff:g} ps), need >= {config.min_count}"
        )
    baseline = float(residual[isolated].mean())

    in1 = valid & np.isfinite(dt1) & (dt1 <= edges[-1])
    b1 = np.searchsorted(edges, dt1[in1], side="right") - 1
    b1 = np.clip(b1, 0, nb - 1)
    sums_1d = np.bincount(b1, weights=residual[in1], minlength=nb)
    cnt_1d = np.bincount(b1, minlength=nb)
    filled_1d = cnt_1d >= config.min_count
    raw_1d = np.zeros(nb)
    np.divide(sums_1d, cnt_1d, out=raw_1d, where=cnt_1d > 0)
    corr_1d = _inherit_nearest(
        np.where(filled_1d, raw_1d - baseline, 0.0), filled_1d
    )
    if not filled_1d.any():
        warnings.warn("no walk bin reached min_count; corrections are zero",
                      stacklevel=2)

    if order == 1:
        return WalkCalibration(
            order=1, dt_bin_edges=edges, correction=corr_1d,
            counts=cnt_1d, baseline=baseline,
            correction_1d=corr_1d, counts_1d=cnt_1d,
            isolation_cutoff=config.cutoff, min_count=config.min_count,
        )

    in2 = in1 & np.isfinite(dt2) & (dt2 <= edges[-1])
    b1j = np.clip(np.searchsorted(edges, dt1[in2], side="right") - 1, 0, nb - 1)
    b2j = np.clip(np.searchsorted(edges, dt2[in2], side="right") - 1, 0, nb - 1)
    flat = b1j * nb + b2j
    sums_2d = np.bincount(flat, weights=residual[in2], minlength=nb * nb).reshape(nb, nb)
    cnt_2d = np.bincount(flat, minlength=nb * nb).reshape(nb, nb)
    filled_2d = cnt_2d >= config.min_count
    raw_2d = np.zeros((nb, nb))
    np.divide(sums_2d, cnt_2d, out=raw_2d, where=cnt_2d > 0)
    corr_2d = np.where(filled_2d, raw_2d - baseline,
                       np.broadcast_to(corr_1d[:, None], (nb, nb)))
    return WalkCalibration(
        order=2, dt_bin_edges=edges, correction=corr_2d,
        counts=cnt_2d, baseline=baseline,
        correction_1d=corr_1d, counts_1d=cnt_1d,
        isolation_cutoff=config.cutoff, min_count=config.min_count,
    )


@njit(cache=True, nogil=True)
def _apply_kernel(t, ch, edges, corr1, corr2, order):
    """Single pass over the channel-grouped stream: gaps, bin lookup,
    correction.  Binning replicates searchsorted(edges, gap, 'right') - 1
    so the kernel and the calibration tables always agree."""
    n = t.size
    nb = edges.size - 1
    top = edges[nb]
    out = np.zeros(n, np.float64)
    for i in range(n):
        if i == 0 or ch[i] != ch[i - 1]:
            continue  # first tag on this channel
        dt1 = t[i] - t[i - 1]
        if dt1 > top:
            continue
        lo = 0
        hi = nb + 1
        while lo < hi:  # first edge index strictly above dt1
            mid = (lo + hi) // 2
            if edges[mid] > dt1:
                hi = mid
            else:
                lo = mid + 1
        b1 = min(max(lo - 1, 0), nb - 1)
        if order == 1:
            out[i] = corr1[b1]
            continue
        if i < 2 or ch[i] != ch[i - 2]:
            continue  # second tag on this channel passes uncorrected
        dt2 = t[i] - t[i - 2]
        if dt2 > top:
            out[i] = corr1[b1]  # far second predecessor: 1-D marginal
            continue
        lo = 0
        hi = nb + 1
        while lo < hi:
            mid = (lo + hi) // 2
            if edges[mid] > dt2:
                hi = mid
            else:
                lo = mid + 1
        b2 = min(max(lo - 1, 0), nb - 1)
        out[i] = corr2[b1, b2]
    return out


def apply(
    tags: TagStream, cal: WalkCalibration, *, return_corrections: bool = False
):
    """Subtract the calibrated walk from each tag; output re-sorted.

    Gaps are computed from the uncorrected times of the last one or two
    tags per channel (constant memory per channel, no cascading).  Tags
    without enough history pass through uncorrected.  With
    ``return_corrections`` the per-tag corrections are returned in the
    *input* tag order alongside the corrected stream.
    """
    order = np.argsort(tags.channel, kind="stable")
    corr2 = cal.correction if cal.order == 2 else np.zeros((1, 1))
    corr_grouped = _apply_kernel(
        tags.time.astype(np.float64)[order], tags.channel[order],
        cal.dt_bin_edges, cal.correction_1d, corr2, cal.order,
    )
    corr = np.empty(len(tags))
    corr[order] = corr_grouped
    new_time = np.rint(tags.time.astype(np.float64) - corr).astype(np.int64)
    out = TagStream(new_time, tags.channel.copy(), tags.flags.copy())
    # Corrections are tiny against tag gaps, so the stream usually stays
    # sorted; fall back to a full sort only when it does not.
    if not out.is_sorted():
        out = out.sorted()
    if return_corrections:
        return out, corr
    return out


def apply_chunked(chunks, cal: WalkCalibration):
    """Streaming variant of :func:`apply` over an iterator of sorted chunks.

    Keeps the last two uncorrected tag times per channel across chunk
    boundaries and a small holdback buffer so the emitted chunks are
    globally sorted even when a correction moves a tag across a boundary.
    Yields corrected, sorted chunks; memory is bounded by the chunk size
    plus the holdback window.
    """
    max_shift = float(np.abs(cal.correction).max(initial=0.0))
    if cal.order == 2:
        max_shift = max(max_shift, float(np.abs(cal.correction_1d).max(initial=0.0)))
    holdback = int(np.ceil(max_shift)) + 1

    history: dict[int, tuple] = {}  # channel -> up to two previous times
    pending: TagStream | None = None

    def correct(chunk: TagStream) -> TagStream:
        nonlocal history
        n = len(chunk)
        dt1 = np.full(n, np.nan)
        dt2 = np.full(n, np.nan)
        for ch in np.unique(chunk.channel):
            idx = np.flatnonzero(chunk.channel == ch)
            prev = history.get(int(ch), ())
            t = np.concatenate([np.asarray(prev, np.float64),
                                chunk.time[idx].astype(np.float64)])
            k = len(prev)
            g1 = np.full(t.size, np.nan)
            g2 = np.full(t.size, np.nan)
            g1[1:] = t[1:] - t[:-1]
            if t.size > 2:
                g2[2:] = t[2:] - t[:-2]
            dt1[idx] = g1[k:]
            dt2[idx] = g2[k:]
            history[int(ch)] = tuple(t[-2:])
        corr = cal.lookup(dt1, dt2) if cal.order == 2 else cal.lookup(dt1)
        new_time = np.rint(chunk.time.astype(np.float64) - corr).astype(np.int64)
        return TagStream(new_time, chunk.channel.copy(), chunk.flags.copy())

    for chunk in chunks:
        if len(chunk) == 0:
            continue
        watermark = int(chunk.time[0]) - holdback
        corrected = correct(chunk)
        if pending is not None:
            corrected = TagStream(
                np.concatenate([pending.time, corrected.time]),
                np.concatenate([pending.channel, corrected.channel]),
                np.concatenate([pending.flags, corrected.flags]),
            )
        merged = corrected.sorted()
        # corrected times at or above the watermark may still be overtaken
        # by tags from the next input chunk
        cut = int(np.searchsorted(merged.time, watermark))
        if cut > 0:
            yield TagStream(merged.time[:cut], merged.channel[:cut],
                            merged.flags[:cut])
        pending = TagStream(merged.time[cut:], merged.channel[cut:],
                            merged.flags[cut:])
    if pending is not None and len(pending):
        yield pending
