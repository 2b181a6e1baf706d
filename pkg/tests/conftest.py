import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mrsae.data import SyntheticSpec, generate_synthetic_cohort  # noqa: E402
from mrsae.sae import TrainConfig, train  # noqa: E402

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = os.path.join(ROOT, "configs")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cohort():
    spec = SyntheticSpec(n_subjects=300, scans_per_subject=(1, 3), d=16,
                         factors=("age", "disease", "sex", "nuisance", "nuisance"), seed=3)
    return generate_synthetic_cohort(spec)


@pytest.fixture(scope="session")
def small_model(small_cohort):
    H, cov, _ = small_cohort
    cfg = TrainConfig(k=4, expansion=2, lam=0.1, k_nn=5, epochs=4, batch_size=64, seed=1)
    return train(H, cfg, subjects=cov.subject_id)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
