import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from multiminer.nets import HeadConfig, MinerNetworks, NetworkConfig
from multiminer.scenes import DatasetSpec, generate_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(DatasetSpec(num_scenes=24, seed=77))


@pytest.fixture
def tiny_nets():
    """Randomly initialised networks with narrow heads (fast forward passes)."""
    nets = MinerNetworks(NetworkConfig(head=HeadConfig(hidden=8)))
    nets.freeze("extractor")
    return nets


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(pytestconfig):
    """Record one PASS/FAIL line for the acceptance summary, then return the verdict."""
    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(line)
        pytestconfig.stash[ACCEPTANCE_KEY].append(line)
        return passed
    return record


@pytest.fixture(scope="session")
def default_runs(tmp_path_factory):
    """Two ``multiminer full`` runs of the shipped default config; returns their run dirs."""
    import time

    from multiminer.cli import main
    runs = []
    for name in ("first", "second"):
        out = tmp_path_factory.mktemp("default") / name
        t0 = time.perf_counter()
        assert main(["full", "--out", str(out)]) == 0
        runs.append({"dir": out, "wall": time.perf_counter() - t0})
    return runs
