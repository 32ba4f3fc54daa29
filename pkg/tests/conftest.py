import numpy as np
import pytest
from hypothesis import settings

from drwbc.trajdata import Dataset, Trajectory

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def make_traj(T=5, d_s=4, d_a=2, tid=0, seed=0, tag="clean", bound=2.0):
    rng = np.random.default_rng(seed)
    return Trajectory(
        rng.standard_normal((T + 1, d_s)),
        rng.uniform(-bound, bound, (T, d_a)),
        rng.standard_normal(T),
        id=tid,
        tag=tag,
    )


def make_dataset(n=10, T=5, d_s=4, d_a=2, seed=0, env_id="point_mass_2d"):
    trajs = [make_traj(T, d_s, d_a, tid=i, seed=seed * 1000 + i) for i in range(n)]
    return Dataset(tuple(trajs), env_id, seed, d_s, d_a, -2.0, 2.0)


@pytest.fixture
def small_dataset():
    return make_dataset()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
