from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest

from siopf.feeder import build_grid_matrices
from siopf.mpqp import assemble_mpqp
from siopf.networks import five_bus_feeder, ieee37_like_feeder
from siopf.scenarios import calibrate_profiles, generate_profiles, solve_minutes, theta_matrix

# Load at bus 3 heavy enough that buses 3 and 4 (its device-free child) hit
# the lower voltage limit together while both inverters stay inside ratings.
LICQ_THETA = np.array([0.0, 0.0, -0.7, 0.0, 0.35])


def _bundle(feeder):
    gm = build_grid_matrices(feeder)
    return SimpleNamespace(feeder=feeder, gm=gm, inst=assemble_mpqp(gm, feeder))


@pytest.fixture(scope="session")
def five_bus():
    return _bundle(five_bus_feeder())


@pytest.fixture(scope="session")
def ieee37():
    return _bundle(ieee37_like_feeder())


@pytest.fixture(scope="session")
def synthetic_day(ieee37):
    profiles = calibrate_profiles(generate_profiles(ieee37.feeder, seed=1), ieee37.feeder)
    thetas = theta_matrix(profiles, ieee37.gm)
    records = solve_minutes(ieee37.inst, thetas, range(1440), with_jacobian=True)
    return SimpleNamespace(profiles=profiles, thetas=thetas, records=records)
