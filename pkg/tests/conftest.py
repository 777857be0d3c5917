"""Shared fixtures. Thread caps must be set before numpy loads BLAS."""

import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import pytest  # noqa: E402


@pytest.fixture(scope="session")
def fleet_pretrain_result():
    """2000-step pre-training run on the 32-entity transfer fleet.

    Shared by the training-curve test and the transfer acceptance criterion.
    """
    from mtsad.experiments import pretrain_fleet

    return pretrain_fleet(steps=2000)
