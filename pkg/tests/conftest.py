import contextlib
import time

import pytest

_RESULTS = []


class _Record:
    detail = ""


@pytest.fixture
def criterion():
    """Context manager that logs one PASS/FAIL line for an acceptance criterion."""

    @contextlib.contextmanager
    def run(number, name):
        rec = _Record()
        start = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            line = f"[FAIL] criterion {number:2d}: {name} ({time.perf_counter() - start:.1f} s) {rec.detail} :: {exc!r:.200}"
            _RESULTS.append(line)
            print(line)
            raise
        line = f"[PASS] criterion {number:2d}: {name} ({time.perf_counter() - start:.1f} s) {rec.detail}"
        _RESULTS.append(line)
        print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
