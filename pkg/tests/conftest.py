import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def random_spd(rng, dim, low=0.5, high=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return (q * rng.uniform(low, high, dim)) @ q.T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_SIA = dict(nx=9, ny=9, dx_km=50.0, dy_km=50.0, T_years=4.0, nt=8, aux_nx=3, aux_ny=3,
                 obs_every=2)


@pytest.fixture(scope="session")
def small_sia():
    from bayeshdsa.models import build_sia_model
    return build_sia_model(1, **SMALL_SIA)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one summary line per acceptance criterion."""
    def record(number, title, checks, notes=()):
        ok = all(passed for _, passed, _ in checks)
        detail = "; ".join([f"{label}: {text}" for label, _, text in checks]
                           + [f"{label} [not gated]: {text}" for label, text in notes])
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
