"""Event-driven Monte Carlo and time-tag analysis for nanowire single-photon
detector arrays: device physics, Gaussian mode coupling, discriminator-level
pulse simulation, rate/jitter analysis and time-walk correction."""

__version__ = "0.1.0"

from .analysis import (
    AnalysisError,
    Histogram,
    RateCurve,
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
from .config import ConfigError, RunConfig, load_config, parse_config
from .detector import (
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
from .engine import (
    DiscriminatorConfig,
    PhotonSource,
    TagRecord,
    TagStream,
    TruthRecord,
    TruthStream,
    generate_arrivals,
    inject_crosstalk,
    simulate_array,
    simulate_wire,
)
from .optics import (
    ArrayGeometry,
    CouplingProfile,
    GaussianMode,
    coupling_profile,
    misalignment_penalty,
    sde,
    slab_fraction,
)
from .walk import WalkCalibration, WalkConfig, CalibrationError, calibrate, default_walk_config
from .walk import apply as apply_walk_correction
