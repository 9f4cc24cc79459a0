import numpy as np
import pytest

from snspdsim import CouplingProfile, DiscriminatorConfig, WireParams


@pytest.fixture
def wire() -> WireParams:
    return WireParams()


@pytest.fixture
def quiet_wire() -> WireParams:
    """Reference wire with dark counts disabled, for clean rate statistics."""
    return WireParams(dcr_background=0.0)


@pytest.fixture
def single_wire_profile() -> CouplingProfile:
    return CouplingProfile(per_wire=np.array([1.0]), uncoupled=0.0)


@pytest.fixture
def noiseless_disc() -> DiscriminatorConfig:
    return DiscriminatorConfig(threshold_fraction=0.25)
