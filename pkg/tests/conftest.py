import pytest

from sharpkit import diffcore as dc
from sharpkit import modelzoo as mz
from sharpkit import sharpopt as so


def train_full_batch(obj, w, batch, lr=1e-2, steps=2000):
    """Reference trainer: full-batch Adam. Used to reach representative points."""
    state = so.BaseOptimizerState.init(obj.param_count, lr=lr)
    for _ in range(steps):
        r = dc.value_and_grad(obj, w, batch)
        w, state = so.base_step(state, w, r.grad)
    return w


@pytest.fixture(scope="session")
def moons():
    return mz.two_moons(200, 0.1, 3)


@pytest.fixture(scope="session")
def moons_train(moons):
    return moons.train()


@pytest.fixture(scope="session")
def small_batch(moons):
    return moons.subset(moons.train_indices[:16], index=0)


@pytest.fixture(scope="session")
def mlp282():
    return mz.make_mlp(mz.ModelSpec((2, 8, 2), init_seed=7))


@pytest.fixture(scope="session")
def mlp282_trained(mlp282, moons_train):
    return train_full_batch(mlp282, mlp282.init_params(), moons_train)


@pytest.fixture(scope="session")
def quad31():
    return mz.make_quadratic([3.0, 1.0])


ZOO_SPECS = [
    mz.ModelSpec((2, 8, 2), init_seed=7),
    mz.ModelSpec((2, 16, 2), init_seed=1),
    mz.ModelSpec((2, 8, 2), activation="tanh", init_seed=3),
    mz.ModelSpec((2, 6, 5, 2), init_seed=4),
    mz.ModelSpec((2, 4, 2), loss="mse", init_seed=5),
]


@pytest.fixture(scope="session")
def unit_batch():
    return mz.UNIT_BATCH


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
