import numpy as np
import pytest

from dropsmpc.lifting import build_cost_blocks
from dropsmpc.model import LinearSystem, NoiseModel, reachability_data
from dropsmpc.smpc import stability_config

# Benchmark plant: 3-state orthogonal rotation (eigenvalues +/-i and -1)
# with a single bounded input and unit-variance-scale Gaussian noise.
ROT3_A = np.array([
    [0.00, -0.80, -0.60],
    [0.80, -0.36, 0.48],
    [0.60, 0.48, -0.64],
])
ROT3_B = np.array([[0.16], [0.12], [0.14]])
ROT3_QF = np.array([
    [12.0, -0.1, -0.4],
    [-0.1, 19.0, -0.2],
    [-0.4, -0.2, 2.0],
])
ROT3_X0 = np.array([10.0, 10.0, -10.0])
ROT3_UMAX = 15.0
ROT3_R_DRIFT = 0.4729
ROT3_EPS = 0.02


@pytest.fixture(scope="session")
def rot3():
    return LinearSystem(A=ROT3_A, B=ROT3_B, u_max=ROT3_UMAX, d_o=3, d_s=0)


@pytest.fixture(scope="session")
def rot3_reach(rot3):
    return reachability_data(rot3)


@pytest.fixture(scope="session")
def rot3_costs():
    return build_cost_blocks(np.eye(3), ROT3_QF, np.array([[2.0]]), N=4)


@pytest.fixture(scope="session")
def rot3_noise():
    return NoiseModel(covariance=2.0 * np.eye(3))


@pytest.fixture(scope="session")
def rot3_stability(rot3, rot3_reach):
    return stability_config(rot3, rot3_reach, r=ROT3_R_DRIFT, epsilon=ROT3_EPS,
                            zeta=ROT3_R_DRIFT)
