"""Run configuration: JSON ingestion, schema validation, resolution.

A run config is a single JSON document (see docs/run_config.schema.json).
Keys mirror the dataclass field names; units follow the package
conventions (currents uA, inductance nH, times ns unless suffixed, rates
photons/s or counts/s, lengths um for the mode and nm for the array pitch,
duration in seconds).  Validation is strict: unknown keys are rejected and
every violation is reported, not just the first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .detector import WireParams
from .engine import DiscriminatorConfig, PhotonSource
from .optics import ArrayGeometry, CouplingProfile, GaussianMode, coupling_profile

__all__ = ["ConfigError", "RunConfig", "default_config_dict", "parse_config", "load_config"]


class ConfigError(ValueError):
    """Validation failure; ``violations`` lists every problem found."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid config:\n  " + "\n  ".join(self.violations))


_WIRE_KEYS = {f.name for f in fields(WireParams)}
_GEOMETRY_KEYS = {f.name for f in fields(ArrayGeometry)}
_MODE_KEYS = {f.name for f in fields(GaussianMode)}
_SOURCE_KEYS = {f.name for f in fields(PhotonSource)}
_DISC_KEYS = {f.name for f in fields(DiscriminatorConfig)} | {"threshold_overrides"}
_DEVICE_KEYS = {"shared", "overrides"}
_CROSSTALK_KEYS = {"probability", "delay_sigma"}
_TOP_KEYS = {
    "seed", "duration", "optical_efficiency", "geometry", "mode", "source",
    "device", "discriminator", "crosstalk",
}

_OPTIONAL_NUMBER_WIRE_KEYS = {"tau_rise", "tau_fall"}


def default_config_dict() -> dict:
    """Reference configuration; the caller must still supply a seed."""
    return {
        "seed": 0,
        "duration": 0.001,
        "optical_efficiency": 0.7943,
        "geometry": {"n_wires": 32, "pitch": 400.0, "wire_width": 120.0, "wire_length": 30.0},
        "mode": {"mode_field_diameter": 10.4, "offset": -0.76},
        "source": {
            "kind": "cw", "cw_rate": 1.0e8, "rep_rate": 0.0,
            "pulse_sigma": 0.0, "mean_photons_per_pulse": 0.0,
        },
        "device": {
            "shared": {
                "i_detect": 6.0, "sigma": 0.35, "i_switch": 9.15, "i_latch": 9.5,
                "bias_fraction": 0.95, "l_kinetic": 680.0, "r_load": 100.0,
                "pulse_amp_per_current": 57.5, "tau_rise": None, "tau_fall": None,
                "dcr_background": 0.4, "dcr_exp_amp": 0.0, "dcr_exp_scale": 1.0,
            },
            "overrides": {},
        },
        "discriminator": {
            "threshold_fraction": 0.25, "amp_noise_sigma": 2.0,
            "electronics_jitter_sigma": 8.9, "threshold_overrides": {},
        },
        "crosstalk": {"probability": 0.0, "delay_sigma": 50.0},
    }


@dataclass
class RunConfig:
    """Fully resolved run configuration."""

    seed: int
    duration: float
    optical_efficiency: float
    geometry: ArrayGeometry
    mode: GaussianMode
    source: PhotonSource
    wires: list[WireParams]
    discriminators: list[DiscriminatorConfig]
    crosstalk_probability: float
    crosstalk_delay_sigma: float
    raw: dict = field(repr=False)

    def coupling(self) -> CouplingProfile:
        return coupling_profile(self.geometry, self.mode, self.optical_efficiency)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_unknown(section: dict, allowed: set, path: str, violations: list) -> None:
    for key in sorted(set(section) - allowed):
        violations.append(f"{path}{key}: unknown key")


def _check_numbers(section: dict, keys: set, path: str, violations: list,
                   optional: set = frozenset(), ints: set = frozenset(),
                   strings: set = frozenset()) -> None:
    for key in sorted(set(section) & keys):
        v = section[key]
        if key in strings:
            if not isinstance(v, str):
                violations.append(f"{path}{key}: expected a string")
        elif key in ints:
            if not isinstance(v, int) or isinstance(v, bool):
                violations.append(f"{path}{key}: expected an integer")
        elif v is None:
            if key not in optional:
                violations.append(f"{path}{key}: expected a number")
        elif not _is_number(v):
            violations.append(f"{path}{key}: expected a number")


def _merged(defaults: dict, given: dict) -> dict:
    out = dict(defaults)
    out.update(given)
    return out


def parse_config(data: dict) -> RunConfig:
    """Validate and resolve a config dict; raises ConfigError listing all violations."""
    if not isinstance(data, dict):
        raise ConfigError(["top level: expected a JSON object"])
    violations: list[str] = []
    defaults = default_config_dict()
    _check_unknown(data, _TOP_KEYS, "", violations)

    if "seed" not in data:
        violations.append("seed: required (every randomized command needs an explicit seed)")
    elif not isinstance(data["seed"], int) or isinstance(data["seed"], bool) or data["seed"] < 0:
        violations.append("seed: expected a nonnegative integer")

    duration = data.get("duration", defaults["duration"])
    if not _is_number(duration) or duration <= 0:
        violations.append("duration: expected a positive number of seconds")

    oe = data.get("optical_efficiency", defaults["optical_efficiency"])
    if not _is_number(oe) or not 0.0 < oe <= 1.0:
        violations.append("optical_efficiency: expected a number in (0, 1]")

    def section(name: str, allowed: set, ints=frozenset(), strings=frozenset(),
                optional=frozenset()) -> dict:
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            violations.append(f"{name}: expected an object")
            return dict(defaults[name])
        _check_unknown(raw, allowed, f"{name}.", violations)
        _check_numbers(raw, allowed, f"{name}.", violations,
                       ints=ints, strings=strings, optional=optional)
        return raw

    geometry_raw = _merged(defaults["geometry"],
                           section("geometry", _GEOMETRY_KEYS, ints={"n_wires"}))
    mode_raw = _merged(defaults["mode"], section("mode", _MODE_KEYS))
    source_raw = _merged(defaults["source"], section("source", _SOURCE_KEYS, strings={"kind"}))
    crosstalk_raw = _merged(defaults["crosstalk"], section("crosstalk", _CROSSTALK_KEYS))

    disc_raw = data.get("discriminator", {})
    if not isinstance(disc_raw, dict):
        violations.append("discriminator: expected an object")
        disc_raw = {}
    _check_unknown(disc_raw, _DISC_KEYS, "discriminator.", violations)
    _check_numbers(disc_raw, _DISC_KEYS - {"threshold_overrides"},
                   "discriminator.", violations)
    disc_shared = _merged(
        {k: v for k, v in defaults["discriminator"].items() if k != "threshold_overrides"},
        {k: v for k, v in disc_raw.items() if k != "threshold_overrides"},
    )
    threshold_overrides = disc_raw.get("threshold_overrides", {})
    if not isinstance(threshold_overrides, dict):
        violations.append("discriminator.threshold_overrides: expected an object")
        threshold_overrides = {}

    device_raw = data.get("device", {})
    if not isinstance(device_raw, dict):
        violations.append("device: expected an object")
        device_raw = {}
    _check_unknown(device_raw, _DEVICE_KEYS, "device.", violations)
    shared_raw = device_raw.get("shared", {})
    if not isinstance(shared_raw, dict):
        violations.append("device.shared: expected an object")
        shared_raw = {}
    _check_unknown(shared_raw, _WIRE_KEYS, "device.shared.", violations)
    _check_numbers(shared_raw, _WIRE_KEYS, "device.shared.", violations,
                   optional=_OPTIONAL_NUMBER_WIRE_KEYS)
    wire_shared = _merged(defaults["device"]["shared"], shared_raw)
    overrides = device_raw.get("overrides", {})
    if not isinstance(overrides, dict):
        violations.append("device.overrides: expected an object")
        overrides = {}

    n_wires = geometry_raw.get("n_wires", 32)
    if not isinstance(n_wires, int) or n_wires < 1:
        n_wires = 1  # already reported above; keep resolving

    def check_channel_key(key: str, path: str) -> int | None:
        if not (isinstance(key, str) and key.isdigit()):
            violations.append(f"{path}: channel keys must be decimal strings")
            return None
        ch = int(key)
        if ch >= n_wires:
            violations.append(f"{path}: channel {ch} out of range (n_wires={n_wires})")
            return None
        return ch

    per_wire_raw: dict[int, dict] = {}
    for key, patch in overrides.items():
        ch = check_channel_key(key, f"device.overrides.{key}")
        if ch is None:
            continue
        if not isinstance(patch, dict):
            violations.append(f"device.overrides.{key}: expected an object")
            continue
        _check_unknown(patch, _WIRE_KEYS, f"device.overrides.{key}.", violations)
        _check_numbers(patch, _WIRE_KEYS, f"device.overrides.{key}.", violations,
                       optional=_OPTIONAL_NUMBER_WIRE_KEYS)
        per_wire_raw[ch] = patch

    thresholds: dict[int, float] = {}
    for key, value in threshold_overrides.items():
        ch = check_channel_key(key, f"discriminator.threshold_overrides.{key}")
        if ch is None:
            continue
        if not _is_number(value):
            violations.append(f"discriminator.threshold_overrides.{key}: expected a number")
            continue
        thresholds[ch] = float(value)

    # Construct the domain objects; their own validation catches relational
    # constraints (e.g. i_detect < i_switch).
    geometry = mode = source = None
    wires: list[WireParams] = []
    discs: list[DiscriminatorConfig] = []
    try:
        geometry = ArrayGeometry(**geometry_raw)
    except (TypeError, ValueError) as exc:
        violations.append(f"geometry: {exc}")
    try:
        mode = GaussianMode(**mode_raw)
    except (TypeError, ValueError) as exc:
        violations.append(f"mode: {exc}")
    try:
        source = PhotonSource(**source_raw)
    except (TypeError, ValueError) as exc:
        violations.append(f"source: {exc}")
    for ch in range(n_wires):
        merged = _merged(wire_shared, per_wire_raw.get(ch, {}))
        try:
            wires.append(WireParams(**merged))
        except (TypeError, ValueError) as exc:
            violations.append(f"device (channel {ch}): {exc}")
            break
    for ch in range(n_wires):
        merged = dict(disc_shared)
        if ch in thresholds:
            merged["threshold_fraction"] = thresholds[ch]
        try:
            discs.append(DiscriminatorConfig(**merged))
        except (TypeError, ValueError) as exc:
            violations.append(f"discriminator (channel {ch}): {exc}")
            break

    ct_prob = crosstalk_raw.get("probability", 0.0)
    ct_sigma = crosstalk_raw.get("delay_sigma", 50.0)
    if _is_number(ct_prob) and not 0.0 <= ct_prob <= 1.0:
        violations.append("crosstalk.probability: expected a number in [0, 1]")
    if _is_number(ct_sigma) and ct_sigma < 0.0:
        violations.append("crosstalk.delay_sigma: expected a nonnegative number")

    if violations:
        raise ConfigError(violations)

    resolved = {
        "seed": data["seed"],
        "duration": duration,
        "optical_efficiency": oe,
        "geometry": geometry_raw,
        "mode": mode_raw,
        "source": source_raw,
        "device": {"shared": wire_shared,
                   "overrides": {str(k): v for k, v in sorted(per_wire_raw.items())}},
        "discriminator": {**disc_shared,
                          "threshold_overrides": {str(k): v for k, v in sorted(thresholds.items())}},
        "crosstalk": {"probability": ct_prob, "delay_sigma": ct_sigma},
    }
    return RunConfig(
        seed=int(data["seed"]),
        duration=float(duration),
        optical_efficiency=float(oe),
        geometry=geometry,
        mode=mode,
        source=source,
        wires=wires,
        discriminators=discs,
        crosstalk_probability=float(ct_prob),
        crosstalk_delay_sigma=float(ct_sigma),
        raw=resolved,
    )


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config {path} is not valid JSON: {exc}"]) from exc
    return parse_config(data)
