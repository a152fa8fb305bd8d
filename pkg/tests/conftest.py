import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from corpus_util import stdlib_docstrings  # noqa: E402

from phasemem.ccore import precision  # noqa: E402


@pytest.fixture
def f64():
    with precision(torch.float64):
        yield


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_text():
    return stdlib_docstrings(120_000)


@pytest.fixture(scope="session")
def small_corpus_file(tmp_path_factory, small_text):
    path = tmp_path_factory.mktemp("corpus") / "docs.txt"
    path.write_bytes(small_text)
    return path


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
