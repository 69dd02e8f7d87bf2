import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dataset(rng, rows=4, max_size=30, max_count=12, lam_free=True):
    """Small dataset with distinct pool sizes and interior positive counts."""
    sizes = rng.choice(np.arange(1, max_size + 1), size=rows, replace=False)
    counts = rng.integers(2, max_count + 1, size=rows)
    positives = np.array([rng.integers(0, n + 1) for n in counts])
    if positives.sum() == 0:
        positives[0] = 1
    if positives.sum() == counts.sum():
        positives[0] -= 1
    from pooltest import PooledDataset

    return PooledDataset(sizes, counts, positives)


# acceptance outcomes, printed once at the end of the run
ACCEPTANCE_RESULTS: list[tuple[str, bool | None, str]] = []  # None marks a skip


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name}: {detail}")
