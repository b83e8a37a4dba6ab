import numpy as np
import pytest

from safeope.envs import make_random_cmdp, random_policy

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE.append((marker.args[0], marker.args[1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, outcome in sorted(_ACCEPTANCE):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")


def small_models(count, seed=0, max_states=4, max_actions=3, max_horizon=4):
    """Seeded random models and strictly positive targets within enumeration range."""
    from safeope.cmdp import make_rng

    rng = make_rng(seed, 99)
    out = []
    for k in range(count):
        S = int(rng.integers(2, max_states + 1))
        A = int(rng.integers(2, max_actions + 1))
        T = int(rng.integers(1, max_horizon + 1))
        model = make_random_cmdp(S, A, T, seed=1000 * seed + k)
        out.append((model, random_policy(model, seed=50_000 + 1000 * seed + k)))
    return out


@pytest.fixture
def tiny():
    """3 states, 2 actions, horizon 3, with a positive target."""
    model = make_random_cmdp(3, 2, 3, seed=7)
    return model, random_policy(model, seed=8)


def rows_close(a, b, tol):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) <= tol
