import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import snncvt.tensor as tn
from snncvt.data import write_idx

settings.register_profile(
    "repo", deadline=None, max_examples=40, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")


@pytest.fixture
def float64_mode(monkeypatch):
    """Run the autograd engine in double precision (for finite-difference checks)."""
    monkeypatch.setattr(tn, "DTYPE", np.float64)
    yield


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory):
    """sklearn's 8x8 digits written as an MNIST-style IDX pair (uint8, 0..255)."""
    from sklearn.datasets import load_digits

    d = load_digits()
    root = tmp_path_factory.mktemp("digits")
    images, labels = root / "digits-images.idx", root / "digits-labels.idx"
    write_idx(images, np.clip(d.images * 16, 0, 255).astype(np.uint8))
    write_idx(labels, d.target.astype(np.uint8))
    return str(images), str(labels)


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(key, ok, detail)`` records one acceptance line and returns ``ok``."""
    def record(key, ok, detail=""):
        ACCEPTANCE[key] = (bool(ok), detail)
        print(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key:<5} {detail}")
