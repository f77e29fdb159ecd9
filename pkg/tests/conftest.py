import numpy as np
import pytest

from noisyal.datapool import EmbeddingPool, SyntheticSpec, generate_synthetic


def raw_pool(points, labels=None, class_count=None):
    """Pool over raw (not normalized) coordinates, for hand-built geometry."""
    pts = np.asarray(points, dtype=float)
    if labels is None:
        labels = np.arange(len(pts)) % 2
    labels = np.asarray(labels)
    C = class_count or max(2, int(labels.max()) + 1)
    return EmbeddingPool(pts, labels, C, normalized=False)


@pytest.fixture
def line3():
    return raw_pool([[0.0], [1.0], [2.0]], [0, 1, 0])


@pytest.fixture(scope="session")
def synth_small():
    return generate_synthetic(SyntheticSpec(class_count=5, points_per_class=40, dim=8, seed=3))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed at the end of the run."""

    def report(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
