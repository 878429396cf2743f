import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from decoytrap import emulator  # noqa: E402


@pytest.fixture
def small_corpus(tmp_path):
    """Three folders of 40 files each, with its manifest."""
    spec = emulator.CorpusSpec(3, emulator.CountLaw(40), seed=3)
    root = tmp_path / "corpus"
    manifest = emulator.generate_corpus(spec, str(root))
    return str(root), manifest


def make_files(directory, names, content=b"x"):
    os.makedirs(directory, exist_ok=True)
    for n in names:
        with open(os.path.join(directory, n), "wb") as fh:
            fh.write(content)


# Acceptance verdicts, printed together at the end of the session.
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
