import numpy as np
import pytest

from vnn_brainage.covariance import CovarianceModel, covariance_of
from vnn_brainage.dataset import Cohort, Group, Subject


def make_cohort(n=30, m=6, seed=0, groups=None, cdr=False, scale_tag="test"):
    rng = np.random.default_rng(seed)
    if groups is None:
        groups = [Group.HC] * n
    X = rng.normal(2.5, 0.2, size=(n, m))
    ages = rng.uniform(55, 85, size=n)
    subjects = []
    for i in range(n):
        c = float(rng.uniform(0, 10)) if cdr and groups[i] is not Group.HC else None
        subjects.append(Subject(f"s{i:03d}", float(ages[i]), groups[i], X[i], c))
    return Cohort(m, scale_tag, tuple(subjects))


def random_cov(m, rng, normalized=True) -> CovarianceModel:
    X = rng.normal(size=(m + 5, m))
    return covariance_of(X) if normalized else CovarianceModel(np.cov(X.T, bias=True), X.mean(0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
