from __future__ import annotations

import numpy as np
import pytest

from payload_predictor import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def circle_log():
    """Short closed-loop circle flight with the 260 g payload under nominal MPC."""
    from payload_predictor.mpc import MpcConfig, MpcController
    from payload_predictor.sim import PlantParams, collect_dataset

    params = PlantParams()
    ctrl = MpcController(params.nominal(), MpcConfig())
    return collect_dataset(ctrl, "circle", 6.0, 50.0, params)


def quick_model(chi, zeta, K=24, seed=0, ridge=1e-3, gamma=10.0):
    """Untrained embedding with least-squares decoder and dynamics; cheap
    stand-in for a trained model in unit tests."""
    from payload_predictor.embedding import apply_spectral_normalization, init_mlp
    from payload_predictor.labeling import LabeledSet
    from payload_predictor.lls import LiftedModel, NormStats
    from payload_predictor.trainer import fit_full_AB, fit_full_C

    norm = NormStats.fit(chi, zeta)
    params = apply_spectral_normalization(init_mlp((6, 128, 128, K), gamma=gamma, seed=seed))
    data = [LabeledSet(np.arange(len(chi)) * 0.02, np.asarray(chi), np.asarray(zeta))]
    A, B = fit_full_AB(data, params, norm, ridge)
    C = fit_full_C(data, params, norm, ridge)
    return LiftedModel(params=params, C=C, A=A, B=B, norm=norm, ridge=ridge)


# one summary line per acceptance criterion, filled by test_acceptance
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
