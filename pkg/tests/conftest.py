import contextlib
import time

import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context-manager factory recording one PASS/FAIL line per acceptance criterion."""
    results = request.config.stash.setdefault(_RESULTS, [])

    @contextlib.contextmanager
    def check(number, title):
        start = time.perf_counter()
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            results.append((number, "FAIL", title, f"{msg} ({time.perf_counter() - start:.1f}s)"))
            raise
        info = ", ".join(f"{k}={v}" for k, v in detail.items())
        results.append((number, "PASS", title, f"{info} ({time.perf_counter() - start:.1f}s)"))

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title, info in sorted(results):
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {title} :: {info}")
