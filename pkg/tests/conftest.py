import mpmath
import numpy as np
import pytest

mpmath.mp.dps = 30


def mp_phi(x):
    """Standard normal cdf at 30 digits."""
    return float(mpmath.ncdf(x))


@pytest.fixture
def phi_ref():
    return mp_phi


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def load_scenario(name, **over):
    from illiq.acceptance import SCENARIO_DIR
    from illiq.config import load_config
    from illiq.scenarios import build_scenario

    spec = load_config(SCENARIO_DIR / name).spec
    return build_scenario(spec.with_(**over) if over else spec)
