import numpy as np
import pytest

from tubefield import fdm
from tubefield.diffnet import NetworkConfig, init_params
from tubefield.training import CollocationConfig, CollocationSets, LossWeights, ObservationData, PinnProblem
from tubefield.physics import AirProperties, SourceWaveform, TubeGeometry, radiation_from_taylor

GT = radiation_from_taylor(0.8236, 0.5)


@pytest.fixture(scope="session")
def air():
    return AirProperties()


@pytest.fixture(scope="session")
def geom():
    return TubeGeometry(1.0, 0.02)


@pytest.fixture(scope="session")
def source():
    return SourceWaveform()


@pytest.fixture(scope="session")
def default_solution(geom, air, source):
    """Converged reference on the default grid (shared by several modules)."""
    return fdm.run_to_steady_state(geom, air, source, GT.alpha, GT.beta, fdm.FdmConfig(nx=501))


@pytest.fixture(scope="session")
def coarse_solution(geom, air, source):
    return fdm.run_to_steady_state(geom, air, source, GT.alpha, GT.beta, fdm.FdmConfig(nx=201))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_problem(geom, air, source):
    """A few dozen collocation points and a small network, for fast loop tests."""
    net = NetworkConfig(n_f=8, n_b=1, ffe_size=4, xi=0.1, seed=2)
    params = init_params(net)
    sets = CollocationSets.build(CollocationConfig(40, 10, 10, 12), geom.length, source.T)
    obs = ObservationData(sets.obs_t, 10 * np.sin(2 * np.pi * sets.obs_t / source.T))
    problem = PinnProblem(sets, obs, geom, air, source, params)
    w = LossWeights(pde=1.0, bc=1e7, obs=1e-2, pc_u=1e7, pc_p=1e-2, pc_phitt=1e-10)
    return problem, params, w
