"""File formats: binary tag streams, truth sidecars, CSV reports, manifests.

Tag files ("PQTG") carry a 16-byte header (4-byte magic, u16 format
version, u16 reserved, u64 record count, all little-endian) followed by
16-byte records: u16 channel, u16 flags (bit 0 dark count, bit 1
cross-talk), u32 reserved, u64 timestamp in ps.  Records are sorted by
timestamp with ties broken by channel.  Truth sidecars ("PQTR") use the
same header with 48-byte float records.  Both read and write paths stream
in bounded-memory chunks.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .engine import TagStream, TruthStream
from .walk import WalkCalibration

__all__ = [
    "TagFileError",
    "TAG_MAGIC",
    "TRUTH_MAGIC",
    "FORMAT_VERSION",
    "TAG_DTYPE",
    "TRUTH_DTYPE",
    "write_tags",
    "write_tag_chunks",
    "read_tags",
    "iter_tag_chunks",
    "write_truth",
    "read_truth",
    "write_csv",
    "read_csv_columns",
    "write_histogram_csv",
    "read_histogram_csv",
    "write_rate_curve_csv",
    "save_calibration",
    "load_calibration",
    "canonical_json",
    "config_sha256",
    "write_manifest",
    "package_versions",
]

TAG_MAGIC = b"PQTG"
TRUTH_MAGIC = b"PQTR"
FORMAT_VERSION = 1
_HEADER_STRUCT = struct.Struct("<4sHHQ")  # magic, version, reserved, record count

TAG_DTYPE = np.dtype([
    ("channel", "<u2"),
    ("flags", "<u2"),
    ("reserved", "<u4"),
    ("time", "<u8"),
])

TRUTH_DTYPE = np.dtype([
    ("photon_time", "<f8"),
    ("detection_time", "<f8"),
    ("dt_prev", "<f8"),
    ("dt_prev2", "<f8"),
    ("pulse_amplitude", "<f8"),
    ("channel", "<u2"),
    ("flags", "<u2"),
    ("reserved", "<u4"),
])


class TagFileError(RuntimeError):
    """Raised for malformed, truncated or mis-sorted tag files."""


def _write_header(fh, magic: bytes, count: int) -> None:
    fh.write(_HEADER_STRUCT.pack(magic, FORMAT_VERSION, 0, count))


def _read_header(fh, magic: bytes, path) -> int:
    raw = fh.read(_HEADER_STRUCT.size)
    if len(raw) < _HEADER_STRUCT.size:
        raise TagFileError(f"{path}: truncated header")
    got_magic, version, _reserved, count = _HEADER_STRUCT.unpack(raw)
    if got_magic != magic:
        raise TagFileError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise TagFileError(f"{path}: unsupported format version {version}")
    return count


def _tags_to_records(tags: TagStream) -> np.ndarray:
    rec = np.zeros(len(tags), dtype=TAG_DTYPE)
    rec["channel"] = tags.channel
    rec["flags"] = tags.flags
    rec["time"] = tags.time.astype(np.uint64)
    return rec


def _records_to_tags(rec: np.ndarray) -> TagStream:
    return TagStream(
        time=rec["time"].astype(np.int64),
        channel=rec["channel"].astype(np.uint16),
        flags=rec["flags"].astype(np.uint16),
    )


def write_tags(path, tags: TagStream, chunk_records: int = 1 << 20) -> None:
    """Write a sorted tag stream; raises if the stream is not sorted."""
    if np.any(tags.time < 0):
        raise TagFileError("tag times must be nonnegative")
    if not tags.is_sorted():
        raise TagFileError("tag stream is not sorted; sort before writing")
    with open(path, "wb") as fh:
        _write_header(fh, TAG_MAGIC, len(tags))
        for start in range(0, len(tags), chunk_records):
            stop = min(start + chunk_records, len(tags))
            _tags_to_records(TagStream(
                tags.time[start:stop], tags.channel[start:stop],
                tags.flags[start:stop],
            )).tofile(fh)


def write_tag_chunks(path, chunks: Iterable[TagStream]) -> int:
    """Stream tag chunks to a file, fixing up the record count afterwards."""
    count = 0
    last = None
    with open(path, "wb") as fh:
        _write_header(fh, TAG_MAGIC, 0)
        for chunk in chunks:
            if len(chunk) == 0:
                continue
            if not chunk.is_sorted():
                raise TagFileError("chunk is not sorted")
            head = (int(chunk.time[0]), int(chunk.channel[0]))
            if last is not None and head < last:
                raise TagFileError("chunks are not globally sorted")
            last = (int(chunk.time[-1]), int(chunk.channel[-1]))
            _tags_to_records(chunk).tofile(fh)
            count += len(chunk)
        fh.seek(0)
        _write_header(fh, TAG_MAGIC, count)
    return count


def _validate_body(path, count: int, record_size: int) -> None:
    body = Path(path).stat().st_size - _HEADER_STRUCT.size
    if body % record_size != 0:
        raise TagFileError(f"{path}: truncated body ({body} bytes)")
    if body // record_size != count:
        raise TagFileError(
            f"{path}: header claims {count} records, body holds {body // record_size}"
        )


def iter_tag_chunks(path, chunk_records: int = 1 << 20) -> Iterator[TagStream]:
    """Stream a tag file in bounded-memory chunks, validating sort order."""
    with open(path, "rb") as fh:
        count = _read_header(fh, TAG_MAGIC, path)
        _validate_body(path, count, TAG_DTYPE.itemsize)
        last = None
        remaining = count
        while remaining > 0:
            n = min(chunk_records, remaining)
            rec = np.fromfile(fh, dtype=TAG_DTYPE, count=n)
            if rec.size != n:
                raise TagFileError(f"{path}: unexpected end of file")
            remaining -= n
            chunk = _records_to_tags(rec)
            if not chunk.is_sorted() or (
                last is not None and (int(chunk.time[0]), int(chunk.channel[0])) < last
            ):
                raise TagFileError(f"{path}: records are not sorted")
            last = (int(chunk.time[-1]), int(chunk.channel[-1]))
            yield chunk


def read_tags(path, *, resort: bool = False) -> TagStream:
    """Read a whole tag file; optionally re-sort mis-ordered records."""
    with open(path, "rb") as fh:
        count = _read_header(fh, TAG_MAGIC, path)
        _validate_body(path, count, TAG_DTYPE.itemsize)
        rec = np.fromfile(fh, dtype=TAG_DTYPE, count=count)
    if rec.size != count:
        raise TagFileError(f"{path}: unexpected end of file")
    tags = _records_to_tags(rec)
    if not tags.is_sorted():
        if not resort:
            raise TagFileError(
                f"{path}: records are not sorted (pass resort=True to fix up)"
            )
        warnings.warn(f"{path}: records were not sorted; re-sorting", stacklevel=2)
        tags = tags.sorted()
    return tags


def write_truth(path, truth: TruthStream, chunk_records: int = 1 << 20) -> None:
    """Write a ground-truth sidecar in detection order."""
    with open(path, "wb") as fh:
        _write_header(fh, TRUTH_MAGIC, len(truth))
        for start in range(0, len(truth), chunk_records):
            stop = min(start + chunk_records, len(truth))
            rec = np.zeros(stop - start, dtype=TRUTH_DTYPE)
            rec["photon_time"] = truth.photon_time[start:stop]
            rec["detection_time"] = truth.detection_time[start:stop]
            rec["dt_prev"] = truth.dt_prev[start:stop]
            rec["dt_prev2"] = truth.dt_prev2[start:stop]
            rec["pulse_amplitude"] = truth.pulse_amplitude[start:stop]
            rec["channel"] = truth.channel[start:stop]
            rec["flags"] = truth.flags[start:stop]
            rec.tofile(fh)


def read_truth(path) -> TruthStream:
    with open(path, "rb") as fh:
        count = _read_header(fh, TRUTH_MAGIC, path)
        _validate_body(path, count, TRUTH_DTYPE.itemsize)
        rec = np.fromfile(fh, dtype=TRUTH_DTYPE, count=count)
    if rec.size != count:
        raise TagFileError(f"{path}: unexpected end of file")
    return TruthStream(
        photon_time=rec["photon_time"].astype(np.float64),
        detection_time=rec["detection_time"].astype(np.float64),
        channel=rec["channel"].astype(np.uint16),
        dt_prev=rec["dt_prev"].astype(np.float64),
        dt_prev2=rec["dt_prev2"].astype(np.float64),
        pulse_amplitude=rec["pulse_amplitude"].astype(np.float64),
        flags=rec["flags"].astype(np.uint16),
    )


def _format_cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".12g")
    return str(value)


def write_csv(path, columns: list[str], rows: Iterable[tuple]) -> None:
    """UTF-8, LF-terminated CSV with a single header row."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(v) for v in row) + "\n")


def read_csv_columns(path) -> tuple[list[str], np.ndarray]:
    """Header names and a float matrix of the numeric body."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, body


def write_histogram_csv(path, hist) -> None:
    rows = zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts)
    write_csv(path, ["bin_left_ps", "bin_right_ps", "count"], rows)


def read_histogram_csv(path):
    from .analysis import Histogram

    _, body = read_csv_columns(path)
    if body.shape[0] == 0:
        raise TagFileError(f"{path}: empty histogram CSV")
    edges = np.append(body[:, 0], body[-1, 1])
    counts = body[:, 2]
    if np.allclose(counts, np.rint(counts)):
        counts = counts.astype(np.int64)
    return Histogram(edges, counts)


def write_rate_curve_csv(path, curve, channel: int | None = None) -> None:
    cols = ["incident_rate_hz", "measured_rate_cps", "relative_efficiency"]
    rows = zip(curve.incident_rate, curve.measured_rate, curve.relative_efficiency)
    if channel is not None:
        cols = ["channel"] + cols
        rows = ((channel, *r) for r in rows)
    write_csv(path, cols, rows)


def save_calibration(path, cal: WalkCalibration, config_hash: str | None = None) -> None:
    """Persist a walk calibration as versioned JSON."""
    payload = {
        "format": "walk-calibration",
        "version": 1,
        "order": cal.order,
        "dt_bin_edges_ps": cal.dt_bin_edges.tolist(),
        "correction_ps": cal.correction.tolist(),
        "counts": cal.counts.tolist(),
        "baseline_ps": cal.baseline,
        "correction_1d_ps": cal.correction_1d.tolist(),
        "counts_1d": cal.counts_1d.tolist(),
        "isolation_cutoff_ps": cal.isolation_cutoff,
        "min_count": cal.min_count,
        "config_sha256": config_hash,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_calibration(path) -> tuple[WalkCalibration, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "walk-calibration":
        raise TagFileError(f"{path}: not a walk calibration file")
    if payload.get("version") != 1:
        raise TagFileError(f"{path}: unsupported calibration version")
    cal = WalkCalibration(
        order=int(payload["order"]),
        dt_bin_edges=np.asarray(payload["dt_bin_edges_ps"]),
        correction=np.asarray(payload["correction_ps"]),
        counts=np.asarray(payload["counts"]),
        baseline=float(payload["baseline_ps"]),
        correction_1d=np.asarray(payload["correction_1d_ps"]),
        counts_1d=np.asarray(payload["counts_1d"]),
        isolation_cutoff=float(payload["isolation_cutoff_ps"]),
        min_count=int(payload["min_count"]),
    )
    return cal, payload


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_sha256(config_dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode("utf-8")).hexdigest()


def package_versions() -> dict:
    import platform

    import numba
    import scipy

    from . import __version__

    return {
        "snspdsim": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def write_manifest(path, payload: dict) -> None:
    """Deterministic JSON run manifest (no timestamps)."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
