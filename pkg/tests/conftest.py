import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: ``acceptance(id, ok, detail, kind="criterion")``."""
    results = request.config.stash[_RESULTS]

    def record(cid: str, ok: bool, detail: str, kind: str = "criterion") -> bool:
        results.append((kind, cid, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for kind, cid, ok, detail in sorted(results, key=lambda r: (r[0] != "criterion", r[0], r[1])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {kind} {cid}: {detail}")
