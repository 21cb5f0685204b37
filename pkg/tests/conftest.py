import numpy as np
import pytest

from jumpsae import _kernels_py, kernels

try:
    from jumpsae import _ext
except ImportError:
    _ext = None

BACKENDS = ["python", "compiled"]


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Run a test once per kernel backend."""
    if request.param == "compiled":
        if _ext is None:
            pytest.skip("compiled extension not built")
        impl = _ext
    else:
        impl = _kernels_py
    for name in ("jumprelu_forward", "jumprelu_backward", "bf16_round_bits"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance verdict: ``with criterion(3, "title") as notes:``."""
    import contextlib
    import time

    results = request.config.__dict__.setdefault("_acceptance", [])

    @contextlib.contextmanager
    def record(number, title):
        notes = []
        start = time.perf_counter()
        try:
            yield notes
        except BaseException:
            results.append((number, title, False, notes, time.perf_counter() - start))
            raise
        results.append((number, title, True, notes, time.perf_counter() - start))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.__dict__.get("_acceptance")
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, notes, seconds in sorted(results, key=lambda r: r[0]):
        detail = "; ".join(notes)
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{verdict} criterion {number:>2}: {title} ({seconds:.1f}s){' :: ' + detail if detail else ''}")
