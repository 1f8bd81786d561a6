import time

import pytest

SESSION = {"start": None, "excluded": 0.0}
VERDICTS: dict[int, tuple[bool, str]] = {}


def pytest_sessionstart(session):
    SESSION["start"] = time.perf_counter()


def pytest_collection_modifyitems(config, items):
    # acceptance checks run last so the suite-duration criterion sees every other test
    items.sort(key=lambda it: it.path.name == "test_acceptance.py")


@pytest.fixture(scope="session")
def verdict():
    """``verdict(n, ok, detail)`` records the outcome line for acceptance criterion ``n``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        prev = VERDICTS.get(n)
        if prev is not None:                  # a criterion checked in several parts
            ok, detail = prev[0] and ok, f"{prev[1]}; {detail}"
        VERDICTS[n] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
