import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from anchorfuse.preprocess import SyntheticSpec, generate_synthetic

settings.register_profile(
    "anchorfuse", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("anchorfuse")

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record_acceptance(number, passed, detail=""):
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


@pytest.fixture
def record():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _seed():
    np.random.seed(0)
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def small_synthetic():
    """A small planted dataset for fast pipeline tests."""
    return generate_synthetic(SyntheticSpec(n_cells=240, n_genes=80, n_variant_genes=20, seed=3))


@pytest.fixture(scope="session")
def acceptance_synthetic():
    return generate_synthetic(SyntheticSpec(n_cells=600, n_genes=200, n_types=3, n_domains=2,
                                            n_variant_genes=50, batch_shift_scale=2.0, noise_scale=0.3,
                                            seed=0))
