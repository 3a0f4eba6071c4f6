import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

TOY_X = np.array([
    [0.5, 0.3, 0.05],
    [0.55, 0.25, -0.1],
    [0.45, 0.35, 0.08],
    [0.1, 0.6, 0.02],
    [0.2, 0.5, -0.05],
    [0.15, 0.55, 0.12],
])


def oracle_hp(m, **kw):
    """Hyperparameter dict in the form the reference implementations expect."""
    hp = dict(kappa0=1.0, nu0=1.0, lambda0=1.0, alpha=1.0, beta=1.0, omega=0.1,
              delta_geom=0.1, delta=np.full(m, 0.05), sigma0_sq=np.full(m, 0.05))
    hp.update(kw)
    return hp


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SPECTRALSBM_NIGHTLY") == "1":
        return
    skip = pytest.mark.skip(reason="set SPECTRALSBM_NIGHTLY=1 to run full-scale checks")
    for item in items:
        if "nightly" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def toy_x():
    return TOY_X.copy()


# one line per acceptance criterion, echoed after the run
CRITERIA = []


def record(number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    CRITERIA.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
