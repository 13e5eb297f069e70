import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=30, derandomize=True)
settings.load_profile("default")


def central_diff(f, x, h):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2.0 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / denom)


def spread_points(rng, n, d=2, scale=1.0, min_gap=0.2):
    """Random landmarks with a minimum pairwise distance."""
    pts = []
    while len(pts) < n:
        x = scale * rng.uniform(-1.0, 1.0, d)
        if all(np.linalg.norm(x - y) >= min_gap for y in pts):
            pts.append(x)
    return np.array(pts)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE = []


def record_criterion(number, title, ok, detail):
    """Print one PASS/FAIL line for an acceptance criterion and keep it for the summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number} ({title}): {detail}"
    ACCEPTANCE.append(line)
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
