import contextlib
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from gaitcnn.synthetic import SyntheticSpec, generate_synthetic
    out = tmp_path_factory.mktemp("corpus")
    spec = SyntheticSpec(subjects=3, sequences=3, frames=30, seed=3)
    return generate_synthetic(spec, out), spec


def pytest_configure(config):
    config.stash[_CRITERIA] = {}


@pytest.fixture
def criterion(request):
    """``with criterion(n, title): ...`` records one PASS/FAIL line for the summary."""
    results = request.config.stash[_CRITERIA]

    @contextlib.contextmanager
    def record(n, title):
        try:
            yield
        except BaseException as exc:
            results[n] = f"FAIL criterion {n:>2}: {title} ({type(exc).__name__}: {exc})"
            raise
        results[n] = f"PASS criterion {n:>2}: {title}"
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n].splitlines()[0][:300])
