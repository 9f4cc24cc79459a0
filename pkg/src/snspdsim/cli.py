"""Command line interface: simulation, analysis and sweep drivers.

Every command writes CSV products plus a deterministic JSON run manifest
(config hash, seed, package versions; no timestamps) into --out.  Errors
are reported on stderr as a JSON object with a machine-readable category;
exit codes: 0 success, 2 config, 3 io, 4 analysis, 5 usage, 70 internal.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    AnalysisError,
    array_rate_curve,
    compose_array_jitter,
    efficiency_vs_rate,
    fit_ide_curve,
    fit_reset_time,
    interarrival_histogram,
    jitter_histogram,
    mcr_3db,
    pair_truth_photon_times,
    width_at_fraction,
    wire_rates_at_array_rate,
)
from .config import ConfigError, RunConfig, parse_config
from .detector import dark_count_rate, dead_time, ide
from .engine import (
    FLAG_CROSSTALK,
    FLAG_DARK,
    generate_arrivals,
    inject_crosstalk,
    merge_tag_streams,
    merge_truth_streams,
    simulate_wire,
)
from .tagio import (
    TagFileError,
    config_sha256,
    iter_tag_chunks,
    load_calibration,
    package_versions,
    read_histogram_csv,
    read_tags,
    read_truth,
    save_calibration,
    write_csv,
    write_histogram_csv,
    write_manifest,
    write_rate_curve_csv,
    write_tag_chunks,
    write_tags,
    write_truth,
)
from .walk import CalibrationError, apply_chunked, calibrate, default_walk_config

SIMULATE_SUMMARY_COLUMNS = ["channel", "n_arrivals", "n_detections", "n_tags", "n_dark_tags"]
PCR_COLUMNS = ["i_bias_ua", "ide", "dcr_cps", "pcr_cps"]
MCR_SUMMARY_COLUMNS = ["channel", "mcr_cps"]
SWEEP_COLUMNS = ["param", "value", "tau_reset_ns", "dead_time_ns", "sde",
                 "wire_mcr_cps", "array_mcr_cps"]
REPORT_COLUMNS = ["channel", "n_tags", "first_ps", "last_ps", "rate_cps"]


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path} is not valid JSON: {exc}"]) from exc


def _effective_config(args) -> RunConfig:
    """Config with --seed / --threshold-fraction folded in before hashing."""
    if args.config is None:
        raise ConfigError(["--config is required for this command"])
    data = _load_json(args.config)
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    tf = getattr(args, "threshold_fraction", None)
    if tf is not None:
        if not isinstance(data.get("discriminator"), dict):
            data["discriminator"] = {}
        data["discriminator"]["threshold_fraction"] = tf
    return parse_config(data)


def _check_channel(cfg: RunConfig, channel: int) -> int:
    if not 0 <= channel < cfg.geometry.n_wires:
        raise ValueError(
            f"--channel {channel} out of range for {cfg.geometry.n_wires} wires"
        )
    return channel


def _write_run_manifest(out: Path, command: str, *, cfg: RunConfig | None = None,
                        parameters: dict | None = None, outputs: dict | None = None,
                        results: dict | None = None) -> Path:
    payload: dict = {"command": command, "versions": package_versions()}
    if cfg is not None:
        payload["config_sha256"] = config_sha256(cfg.raw)
        payload["seed"] = cfg.seed
    if parameters:
        payload["parameters"] = parameters
    if outputs:
        payload["outputs"] = outputs
    if results:
        payload["results"] = results
    path = out / (command.replace("-", "_") + "_manifest.json")
    write_manifest(path, payload)
    return path


def cmd_simulate(args) -> None:
    cfg = _effective_config(args)
    out = _out_dir(args)
    profile = cfg.coupling()
    arrivals = generate_arrivals(cfg.source, profile, cfg.duration, cfg.seed)

    def run(k: int):
        return simulate_wire(
            arrivals.per_wire[k], cfg.wires[k], cfg.discriminators[k], cfg.seed,
            channel=k, duration_ps=arrivals.duration_ps,
        )

    n = cfg.geometry.n_wires
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            per_wire = list(pool.map(run, range(n)))
    else:
        per_wire = [run(k) for k in range(n)]
    tags = merge_tag_streams([r[0] for r in per_wire])
    truth = merge_truth_streams([r[1] for r in per_wire])
    if cfg.crosstalk_probability > 0.0:
        tags = inject_crosstalk(tags, cfg.crosstalk_probability,
                                cfg.crosstalk_delay_sigma, cfg.seed, n_wires=n)

    tags_path = out / "tags.pqtg"
    truth_path = out / "truth.pqtr"
    write_tags(tags_path, tags)
    write_truth(truth_path, truth)

    rows = []
    for k in range(n):
        wire_tags, wire_truth = per_wire[k]
        rows.append((k, arrivals.per_wire[k].size, len(wire_truth), len(wire_tags),
                     int(np.count_nonzero(wire_tags.flags & FLAG_DARK))))
    summary_path = out / "simulate_summary.csv"
    write_csv(summary_path, SIMULATE_SUMMARY_COLUMNS, rows)

    clean = int(np.count_nonzero(tags.flags == 0))
    results = {
        "n_incident_photons": arrivals.n_incident,
        "n_tags": len(tags),
        "n_dark_tags": int(np.count_nonzero(tags.flags & FLAG_DARK)),
        "n_crosstalk_tags": int(np.count_nonzero(tags.flags & FLAG_CROSSTALK)),
        "sde_estimate": clean / arrivals.n_incident if arrivals.n_incident else 0.0,
    }
    _write_run_manifest(out, "simulate", cfg=cfg,
                        parameters={"threads": args.threads},
                        outputs={"tags": tags_path.name, "truth": truth_path.name,
                                 "summary": summary_path.name},
                        results=results)


def cmd_analyze_pcr(args) -> None:
    cfg = _effective_config(args)
    out = _out_dir(args)
    wire = cfg.wires[_check_channel(cfg, args.channel)]
    profile = cfg.coupling()
    if cfg.source.kind == "cw":
        source_rate = cfg.source.cw_rate
    else:
        source_rate = cfg.source.rep_rate * cfg.source.mean_photons_per_pulse
    wire_rate = source_rate * float(profile.per_wire[args.channel])
    fracs = np.linspace(args.bias_min, args.bias_max, args.bias_points)
    i_grid = fracs * wire.i_switch
    eta = np.asarray(ide(i_grid, wire))
    dcr = np.asarray(dark_count_rate(i_grid, wire))
    pcr = wire_rate * eta + dcr
    csv_path = out / "pcr_curve.csv"
    write_csv(csv_path, PCR_COLUMNS, zip(i_grid, eta, dcr, pcr))
    i_detect_fit, sigma_fit = fit_ide_curve(np.column_stack([i_grid, pcr]), wire)
    _write_run_manifest(
        out, "analyze-pcr", cfg=cfg,
        parameters={"channel": args.channel, "bias_points": args.bias_points},
        outputs={"pcr_curve": csv_path.name},
        results={"i_detect_fit_ua": i_detect_fit, "sigma_fit_ua": sigma_fit,
                 "wire_rate_hz": wire_rate},
    )


def cmd_analyze_deadtime(args) -> None:
    cfg = _effective_config(args)
    out = _out_dir(args)
    tags = read_tags(args.tags)
    hist = interarrival_histogram(tags, _check_channel(cfg, args.channel), args.bin_width)
    csv_path = out / "interarrival_histogram.csv"
    write_histogram_csv(csv_path, hist)
    wire = cfg.wires[args.channel]
    tau_fit, residual = fit_reset_time(hist, wire)
    occupied = np.flatnonzero(np.asarray(hist.counts) > 0)
    observed_dead = float(hist.bin_edges[occupied[0]]) if occupied.size else float("nan")
    _write_run_manifest(
        out, "analyze-deadtime", cfg=cfg,
        parameters={"channel": args.channel, "bin_width_ps": args.bin_width,
                    "tags": str(args.tags)},
        outputs={"interarrival_histogram": csv_path.name},
        results={"tau_reset_fit_ns": tau_fit, "fit_residual": residual,
                 "observed_dead_time_ps": observed_dead,
                 "predicted_dead_time_ns": dead_time(wire, 0.01)},
    )


def cmd_analyze_jitter(args) -> None:
    out = _out_dir(args)
    tags = read_tags(args.tags)
    cfg = _effective_config(args) if args.config else None
    if args.reference == "truth":
        if not args.truth:
            raise ValueError("--reference truth requires --truth")
        truth = read_truth(args.truth)
        hist = jitter_histogram(tags, "truth", args.bin_width, truth=truth,
                                channel=args.channel)
    else:
        rep = args.rep_rate
        if rep is None and cfg is not None:
            rep = cfg.source.rep_rate
        if not rep:
            raise ValueError("--reference sync requires --rep-rate or a pulsed config")
        hist = jitter_histogram(tags, "sync", args.bin_width, rep_rate=rep,
                                channel=args.channel)
    csv_path = out / "jitter_histogram.csv"
    write_histogram_csv(csv_path, hist)
    results = {
        "n_tags": len(tags),
        "fwhm_ps": width_at_fraction(hist, 0.5),
        "fw1pm_ps": width_at_fraction(hist, 0.01),
    }
    _write_run_manifest(
        out, "analyze-jitter", cfg=cfg,
        parameters={"reference": args.reference, "bin_width_ps": args.bin_width,
                    "channel": args.channel, "tags": str(args.tags)},
        outputs={"jitter_histogram": csv_path.name},
        results=results,
    )


def cmd_analyze_mcr(args) -> None:
    cfg = _effective_config(args)
    out = _out_dir(args)
    profile = cfg.coupling()
    fiber_rates = np.geomspace(args.min_rate, args.max_rate, args.points)
    array_curve = array_rate_curve(cfg.wires, profile, fiber_rates)
    curve_path = out / "mcr_array_curve.csv"
    write_rate_curve_csv(curve_path, array_curve)
    array_mcr = mcr_3db(array_curve)

    wire_grid = np.geomspace(1e4, 1e10, args.points)
    unique_wires = list(dict.fromkeys(cfg.wires))

    def wire_mcr(wire):
        return mcr_3db(efficiency_vs_rate(wire, wire_grid))

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            mcrs = list(pool.map(wire_mcr, unique_wires))
    else:
        mcrs = [wire_mcr(w) for w in unique_wires]
    unique = dict(zip(unique_wires, mcrs))
    rows = [(k, unique[cfg.wires[k]]) for k in range(len(cfg.wires))]
    rows.append((-1, array_mcr))
    summary_path = out / "mcr_summary.csv"
    write_csv(summary_path, MCR_SUMMARY_COLUMNS, rows)
    _write_run_manifest(
        out, "analyze-mcr", cfg=cfg,
        parameters={"points": args.points, "min_rate": args.min_rate,
                    "max_rate": args.max_rate},
        outputs={"array_curve": curve_path.name, "summary": summary_path.name},
        results={"array_mcr_cps": array_mcr,
                 "wire_mcr_cps": unique[cfg.wires[_check_channel(cfg, args.channel)]],
                 "sde": float(profile.per_wire.sum())},
    )


def cmd_calibrate_walk(args) -> None:
    cfg = _effective_config(args)
    out = _out_dir(args)
    tags = read_tags(args.tags)
    wire = cfg.wires[_check_channel(cfg, args.channel)]
    walk_cfg = default_walk_config(wire)
    if args.reference == "truth":
        if not args.truth:
            raise ValueError("--reference truth requires --truth")
        truth = read_truth(args.truth)
        ref = pair_truth_photon_times(tags, truth)
        cal = calibrate(tags, reference_times=ref, order=args.order, config=walk_cfg)
    else:
        rep = cfg.source.rep_rate
        if not rep:
            raise ValueError("--reference sync requires a pulsed source config")
        cal = calibrate(tags, sync_period_ps=1e12 / rep, order=args.order,
                        config=walk_cfg)
    cal_path = out / "walk_calibration.json"
    save_calibration(cal_path, cal, config_hash=config_sha256(cfg.raw))
    _write_run_manifest(
        out, "calibrate-walk", cfg=cfg,
        parameters={"order": args.order, "reference": args.reference,
                    "channel": args.channel, "tags": str(args.tags)},
        outputs={"calibration": cal_path.name},
        results={"baseline_ps": cal.baseline,
                 "filled_bins": int(np.count_nonzero(cal.counts >= cal.min_count)),
                 "max_correction_ps": float(np.abs(cal.correction).max())},
    )


def cmd_apply_walk(args) -> None:
    out = _out_dir(args)
    cal, _meta = load_calibration(args.calibration)
    out_path = out / "corrected.pqtg"
    n_tags = write_tag_chunks(
        out_path, apply_chunked(iter_tag_chunks(args.tags), cal))
    table_max = float(np.abs(cal.correction).max(initial=0.0))
    _write_run_manifest(
        out, "apply-walk",
        parameters={"tags": str(args.tags), "calibration": str(args.calibration)},
        outputs={"corrected": out_path.name},
        results={"n_tags": n_tags, "order": cal.order,
                 "max_table_correction_ps": table_max},
    )


def cmd_compose_array_jitter(args) -> None:
    cfg = _effective_config(args)
    out = _out_dir(args)
    lib_info = _load_json(args.irf_library)
    rates = lib_info.get("rates_cps")
    paths = lib_info.get("histograms")
    if not isinstance(rates, list) or not isinstance(paths, list) or len(rates) != len(paths):
        raise ConfigError([f"{args.irf_library}: need matching 'rates_cps' and 'histograms' lists"])
    base = Path(args.irf_library).parent
    library = {float(r): read_histogram_csv(base / p) for r, p in zip(rates, paths)}
    profile = cfg.coupling()
    wire_rates = wire_rates_at_array_rate(cfg.wires, profile, args.array_rate)
    composed = compose_array_jitter(wire_rates, library)
    csv_path = out / "composed_jitter_histogram.csv"
    write_histogram_csv(csv_path, composed)
    _write_run_manifest(
        out, "compose-array-jitter", cfg=cfg,
        parameters={"array_rate_cps": args.array_rate,
                    "irf_library": str(args.irf_library)},
        outputs={"composed_histogram": csv_path.name},
        results={"fwhm_ps": width_at_fraction(composed, 0.5),
                 "fw1pm_ps": width_at_fraction(composed, 0.01),
                 "wire_rates_cps": [float(r) for r in wire_rates]},
    )


def _set_config_path(data: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = {}
            node[key] = nxt
        node = nxt
    node[keys[-1]] = value


def cmd_sweep(args) -> None:
    base = _load_json(args.config)
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    out = _out_dir(args)
    values = []
    for raw in args.values.split(","):
        raw = raw.strip()
        try:
            values.append(json.loads(raw))
        except json.JSONDecodeError:
            values.append(raw)
    rows = []
    hashes = []
    for value in values:
        data = json.loads(json.dumps(base))
        _set_config_path(data, args.param, value)
        cfg = parse_config(data)
        wire = cfg.wires[_check_channel(cfg, args.channel)]
        profile = cfg.coupling()
        wire_curve = efficiency_vs_rate(wire, np.geomspace(1e4, 1e10, args.points))
        array_curve = array_rate_curve(cfg.wires, profile, np.geomspace(1e6, 1e12, args.points))
        rows.append((args.param, value, wire.tau_reset, dead_time(wire, 0.01),
                     float(profile.per_wire.sum()), mcr_3db(wire_curve),
                     mcr_3db(array_curve)))
        hashes.append(config_sha256(cfg.raw))
    csv_path = out / "sweep.csv"
    write_csv(csv_path, SWEEP_COLUMNS, rows)
    payload = {
        "command": "sweep", "versions": package_versions(),
        "parameters": {"param": args.param, "values": values,
                       "channel": args.channel, "points": args.points},
        "outputs": {"sweep": csv_path.name},
        "case_config_sha256": hashes,
    }
    write_manifest(out / "sweep_manifest.json", payload)


def cmd_report(args) -> None:
    out = _out_dir(args)
    per_channel: dict[int, list] = {}
    total = 0
    for chunk in iter_tag_chunks(args.tags):
        total += len(chunk)
        for ch in np.unique(chunk.channel):
            sel = chunk.channel == ch
            times = chunk.time[sel]
            entry = per_channel.setdefault(int(ch), [0, None, None])
            entry[0] += int(times.size)
            first, last = int(times.min()), int(times.max())
            entry[1] = first if entry[1] is None else min(entry[1], first)
            entry[2] = last if entry[2] is None else max(entry[2], last)
    rows = []
    for ch in sorted(per_channel):
        n, first, last = per_channel[ch]
        span_s = max(last - first, 1) * 1e-12
        rows.append((ch, n, first, last, n / span_s))
    csv_path = out / "report.csv"
    write_csv(csv_path, REPORT_COLUMNS, rows)
    _write_run_manifest(
        out, "report",
        parameters={"tags": str(args.tags)},
        outputs={"report": csv_path.name},
        results={"n_tags": total, "n_channels": len(per_channel)},
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="snspdsim",
        description="Nanowire single-photon detector array simulator and tag analysis",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", default=".", help="output directory")
        if config:
            p.add_argument("--config", help="JSON run configuration")
            p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = add("simulate", cmd_simulate, "run the array Monte Carlo and write tag files")
    p.add_argument("--threads", type=int, default=1, help="per-wire simulation threads")
    p.add_argument("--threshold-fraction", type=float,
                   help="override the shared discriminator threshold")

    p = add("analyze-pcr", cmd_analyze_pcr, "count rate and efficiency versus bias current")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--bias-points", type=int, default=61)
    p.add_argument("--bias-min", type=float, default=0.4, help="lowest bias fraction of i_switch")
    p.add_argument("--bias-max", type=float, default=1.0, help="highest bias fraction of i_switch")

    p = add("analyze-deadtime", cmd_analyze_deadtime, "inter-arrival histogram and reset-time fit")
    p.add_argument("--tags", required=True)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--bin-width", type=float, default=100.0, help="histogram bin width (ps)")

    p = add("analyze-jitter", cmd_analyze_jitter, "jitter histogram with FWHM / FW1%M")
    p.add_argument("--tags", required=True)
    p.add_argument("--reference", choices=["truth", "sync"], default="truth")
    p.add_argument("--truth", help="truth sidecar for --reference truth")
    p.add_argument("--rep-rate", type=float, help="sync rate (Hz) for --reference sync")
    p.add_argument("--channel", type=int, default=None)
    p.add_argument("--bin-width", type=float, default=2.0, help="histogram bin width (ps)")

    p = add("analyze-mcr", cmd_analyze_mcr, "renewal-theory rate curves and 3 dB rates")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="per-wire analysis threads")
    p.add_argument("--points", type=int, default=41)
    p.add_argument("--min-rate", type=float, default=1e7, help="lowest fiber photon rate (1/s)")
    p.add_argument("--max-rate", type=float, default=1e11, help="highest fiber photon rate (1/s)")

    p = add("calibrate-walk", cmd_calibrate_walk, "build a time-walk calibration table")
    p.add_argument("--tags", required=True)
    p.add_argument("--reference", choices=["truth", "sync"], default="truth")
    p.add_argument("--truth", help="truth sidecar for --reference truth")
    p.add_argument("--order", type=int, choices=[1, 2], default=1)
    p.add_argument("--channel", type=int, default=0,
                   help="wire whose parameters set the gap binning")

    p = add("apply-walk", cmd_apply_walk, "apply a walk calibration to a tag file",
            config=False)
    p.add_argument("--tags", required=True)
    p.add_argument("--calibration", required=True)

    p = add("compose-array-jitter", cmd_compose_array_jitter,
            "compose the array jitter histogram from per-rate IRFs")
    p.add_argument("--array-rate", type=float, required=True,
                   help="total array count rate (counts/s)")
    p.add_argument("--irf-library", required=True,
                   help="JSON with rates_cps[] and histograms[] CSV paths")

    p = add("sweep", cmd_sweep, "design sweep over one config parameter")
    p.add_argument("--param", required=True, help="dotted config path, e.g. device.shared.l_kinetic")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--points", type=int, default=33)

    p = add("report", cmd_report, "summarize a tag file", config=False)
    p.add_argument("--tags", required=True)

    return ap


def _fail(category: str, message: str, violations=None) -> None:
    payload = {"error": {"category": category, "message": message}}
    if violations:
        payload["error"]["violations"] = violations
    print(json.dumps(payload), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        _fail("config", str(exc), exc.violations)
        return 2
    except (TagFileError, OSError) as exc:
        _fail("io", str(exc))
        return 3
    except (AnalysisError, CalibrationError) as exc:
        _fail("analysis", str(exc))
        return 4
    except ValueError as exc:
        _fail("usage", str(exc))
        return 5
    except Exception as exc:  # pragma: no cover - defensive
        _fail("internal", f"{type(exc).__name__}: {exc}")
        return 70
    return 0


if __name__ == "__main__":
    sys.exit(main())
