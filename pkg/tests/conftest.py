import numpy as np
import pytest

from fedgcae.data import PartitionSpec, SynthSpec, synthetic_partition


@pytest.fixture(scope="session")
def small_synth():
    return SynthSpec(num_users=4, train_windows=40, test_windows=16, seed=3)


@pytest.fixture(scope="session")
def small_partition(small_synth):
    return synthetic_partition(PartitionSpec(num_users=4, per_user=100, seed=3), small_synth)


@pytest.fixture(scope="session")
def small_home_partition(small_synth):
    spec = PartitionSpec(scheme="home", num_users=4, per_user=100, num_homes=2, home_min=1, home_max=3, seed=3)
    return synthetic_partition(spec, small_synth)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects the one-line verdict of each acceptance criterion."""
    def record(number, passed, detail, soft=False):
        tag = "PASS" if passed else ("SOFT-FAIL" if soft else "FAIL")
        line = f"[{tag}] criterion {number}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
