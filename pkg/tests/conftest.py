"""Shared fixtures: the two reference device environments used across tests."""

import pytest

from qkdsim.core import ExperimentParams


@pytest.fixture
def bb84_env() -> ExperimentParams:
    # Reference fibre-channel environment for the BB84 studies.
    return ExperimentParams(
        dark_count_rate=1e-5,
        detector_efficiency=0.25,
        misalignment=0.03,
        error_correction_efficiency=1.22,
        total_pulses=1e12,
        failure_probability=1e-7,
    )


@pytest.fixture
def mdi_env() -> ExperimentParams:
    # Reference environment for the MDI studies.
    return ExperimentParams(
        dark_count_rate=8e-7,
        detector_efficiency=0.65,
        misalignment=0.005,
        error_correction_efficiency=1.16,
        total_pulses=1e12,
        failure_probability=1e-7,
    )
