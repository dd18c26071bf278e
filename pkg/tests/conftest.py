import pytest
import torch

torch.set_num_threads(1)

# filled by the acceptance tests, printed once at the end of the session
ACCEPTANCE_LINES: dict = {}


def record(criterion: int, ok: bool, detail: str):
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[criterion])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)
