import numpy as np
import pytest

from vmtlab.nn import Architecture, MlpSpec, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_arch(d=2, hidden=16, k=2, depth=2):
    widths = (d,) + (hidden,) * depth
    return Architecture(MlpSpec(widths), MlpSpec((hidden, k)), MlpSpec((hidden, hidden, 1)))


@pytest.fixture
def small_params():
    return init_params(small_arch(), seed=3)


def random_probs(rng, n, k):
    z = rng.normal(size=(n, k)) * 2.0
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    _CRITERIA[number] = (name, ok, detail)
    print(f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
