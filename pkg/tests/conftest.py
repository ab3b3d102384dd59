from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import settings

from targetmed.data import EstimandSpec, MediatorPartition, ObservationTable, partition_folds
from targetmed.oracle import canonical_law, sample
from targetmed.simharness import well_specified_stacks

settings.register_profile("ci", max_examples=40, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def law():
    return canonical_law()


@pytest.fixture(scope="session")
def sat_stacks(law):
    return well_specified_stacks(law)


@pytest.fixture(scope="session")
def estimands():
    prime = MediatorPartition((0,), 1, (2,))
    return {
        "theta_k_prime": EstimandSpec("theta_k_prime", prime),
        "theta_k": EstimandSpec("theta_k", MediatorPartition.all_but(1, 3)),
        "theta_all": EstimandSpec("theta_all"),
    }


@pytest.fixture(scope="session")
def table_800(law):
    return sample(law, 800, 11)


@pytest.fixture(scope="session")
def plan_800(table_800):
    return partition_folds(table_800, 4, 11)


def make_table(y, a, w, m) -> ObservationTable:
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m[:, None]
    return ObservationTable(
        y=np.asarray(y, dtype=float), a=np.asarray(a, dtype=float), w=w, mediators=m,
        w_names=tuple(f"w{i + 1}" for i in range(w.shape[1])),
        mediator_names=tuple(f"m{j + 1}" for j in range(m.shape[1])),
    )


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield
