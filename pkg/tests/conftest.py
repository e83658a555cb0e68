import time
from dataclasses import replace

import numpy as np
import pytest

from lowbudget.pipeline import RunConfig, make_data, train_uda


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class UdaCache:
    """Default-config adaptation runs, trained once per (seed, lambda) for the whole session."""

    def __init__(self):
        self._runs = {}

    def config(self, seed, lam):
        return replace(RunConfig(), seed=seed, lam=lam)

    def get(self, seed, lam=1.0):
        key = (seed, float(lam))
        if key not in self._runs:
            config = self.config(seed, lam)
            t0 = time.process_time()
            source, target, target_test, oracle = make_data(config)
            model, record = train_uda(config, source, target)
            seconds = time.process_time() - t0
            self._runs[key] = {
                "config": config,
                "data": (source, target, target_test, oracle),
                "uda": (model, record),
                "cpu_seconds": seconds,
            }
        return self._runs[key]


@pytest.fixture(scope="session")
def uda_cache():
    return UdaCache()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(LINES):
            terminalreporter.write_line(LINES[number])
