import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from walkvio.geometry import BodyState, UnitQuaternion, quat_exp
from walkvio.simulator import preset_config, simulate

settings.register_profile("walkvio", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("walkvio")


def random_state(rng, scale=1.0, t=0.0) -> BodyState:
    return BodyState(
        rng.normal(size=3) * scale,
        quat_exp(rng.normal(size=3)),
        rng.normal(size=3),
        rng.normal(size=3) * 0.1,
        rng.normal(size=3) * 0.01,
        t,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_noiseless():
    """Five seconds of noiseless smooth-preset circle walking."""
    return simulate(preset_config("smooth", "circle", seed=3, duration=5.0).noiseless())


@pytest.fixture(scope="session")
def short_noisy():
    return simulate(preset_config("aggressive", "square", seed=4, duration=5.0))


__all__ = ["random_state", "UnitQuaternion"]
