import numpy as np
import pytest

from aida.config import DataConfig
from aida.protocol import benchmark
from aida.trainer import TrainConfig

TINY_DATA = DataConfig(num_sources=3, num_identities=6, samples_per_identity=4, num_cameras=2, feature_dim=8)


@pytest.fixture(scope="session")
def tiny_domains():
    return benchmark(TINY_DATA, seed=11)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        epochs_sup=2,
        epochs_aida=2,
        epochs_sf=1,
        P=4,
        K_inst=2,
        hidden_dims=(12,),
        embed_dim=6,
        sf_pseudo_k=4,
        seed=5,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the terminal summary lists them all."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        request.config.stash.setdefault(VERDICTS, []).append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
