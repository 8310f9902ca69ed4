import os
import tempfile

# Settings and the engine are created at import time, so the database has to
# be redirected before anything from `app` is imported.
_DB_DIR = tempfile.mkdtemp(prefix="sltmpc-tests-")
os.environ["SQLALCHEMY_DATABASE_URI"] = f"sqlite:///{os.path.join(_DB_DIR, 'test.db')}"
os.environ.setdefault("LOG_LEVEL", "WARNING")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app.database import init_db  # noqa: E402
from app.invariant import terminal_ingredients  # noqa: E402
from app.sysmodel import double_integrator  # noqa: E402

init_db()


@pytest.fixture(scope="session")
def di():
    return double_integrator()


@pytest.fixture(scope="session")
def di_sys(di):
    return di[0]


@pytest.fixture(scope="session")
def di_cost(di):
    return di[1]


@pytest.fixture(scope="session")
def di_term(di_sys, di_cost):
    return terminal_ingredients(di_sys, di_cost)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tmp_out(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    return out
