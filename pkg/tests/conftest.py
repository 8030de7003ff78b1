import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qspace.data import DEFAULT_BVALUES, Dataset, DwiStack, Label, LesionRoi, Patient

settings.register_profile("qspace", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("qspace")


def make_patient(pid="p0", label=Label.BENIGN, shape=(3, 6, 6), seed=0, mask=None,
                 n_b=4, fat=50.0, invisible=False):
    rng = np.random.default_rng(seed)
    channels = rng.uniform(1.0, 100.0, (n_b,) + shape).astype(np.float32)
    if mask is None:
        mask = np.zeros(shape, bool)
        mask[1, 1:4, 2:5] = True
    stack = DwiStack(pid, "A", channels, fat)
    return Patient(stack, LesionRoi(mask, label, invisible))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_dataset():
    pats = [make_patient(f"p{i}", Label.BENIGN if i < 3 else Label.MALIGNANT, seed=i) for i in range(6)]
    return Dataset(tuple(pats), DEFAULT_BVALUES, {"source": "unit"})


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, detail = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}")
