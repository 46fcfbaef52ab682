import numpy as np
import pytest

from fairgrad.statistics import SampleBatch


def one_hot_batch(rng, n, d_s=2, d_x=3):
    """Random one-hot batch where every group holds both labels."""
    groups = np.arange(n) % d_s
    rng.shuffle(groups)
    labels = np.zeros(n)
    for k in range(d_s):
        idx = np.flatnonzero(groups == k)
        labels[idx[: max(1, idx.size // 2)]] = 1.0
        labels[idx] = rng.permutation(labels[idx])
    return SampleBatch(rng.normal(size=(n, d_x)), labels, np.eye(d_s)[groups], partition=True)


def interior_scores(rng, n, low=0.05, high=0.95):
    return rng.uniform(low, high, n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    """Store one acceptance outcome; printed as a block at the end of the session."""
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
