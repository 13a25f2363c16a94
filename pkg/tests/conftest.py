import functools
import warnings

import numpy as np
import pytest

from levitraj import ocp, paths, trapsolve
from levitraj.forcemodel import ForceParams

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def device():
    return ForceParams.device()


@pytest.fixture(scope="session")
def published():
    return ForceParams.published()


@functools.lru_cache(maxsize=None)
def designed(kind, width, period=None, auto_gamma=True, plane="xz"):
    """Cached pipeline run shared by several test modules."""
    path = paths.make_builtin(kind, width, plane=plane)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        traj = trapsolve.design_trajectory(path, ForceParams.device(), ocp.OcpConfig(),
                                           period=period, auto_gamma=auto_gamma,
                                           allow_slower=True)
    return path, traj


@functools.lru_cache(maxsize=None)
def timing(kind, width, nodes=240, gamma=1e-4, epsilon=0.05, plane="xz"):
    path = paths.make_builtin(kind, width, plane=plane)
    cfg = ocp.OcpConfig(nodes=nodes, gamma=gamma, epsilon=epsilon)
    return path, cfg, ocp.solve_path(path, ForceParams.device(), cfg)


def record(criterion, ok, detail):
    line = f"ACCEPTANCE criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
