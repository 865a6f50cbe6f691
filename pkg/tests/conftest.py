import numpy as np
import pytest
from hypothesis import settings

from beamform.channel import CMat, SystemConfig, generate_channels, random_feasible_v
from beamform.rng import Stream

settings.register_profile('default', deadline=None, max_examples=50, derandomize=True)
settings.load_profile('default')


@pytest.fixture
def cfg44():
    return SystemConfig.from_snr(4, 4, 10.0)


@pytest.fixture
def instance(cfg44):
    H = generate_channels(cfg44, 1, 3)[0]
    return cfg44, H, random_feasible_v(cfg44, 3, 1)


def random_cmat(stream, rows, cols, scale=1.0):
    return CMat.from_complex(scale * stream.complex_normal((rows, cols)))


def random_instances(n, M=4, N=4, snr_db=10.0, seed=0):
    cfg = SystemConfig.from_snr(M, N, snr_db)
    stream = Stream(seed, 99)
    for _ in range(n):
        yield cfg, random_cmat(stream, N, M), random_cmat(stream, N, M, np.sqrt(cfg.P / (N * M)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep('=', 'acceptance criteria')
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
