import time

import pytest

from fatq import _backend

AVAILABLE = ["python"] + (["cython"] if _backend.BACKEND == "cython" else [])


@pytest.fixture(params=AVAILABLE)
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    monkeypatch.setattr(_backend, "_impl", _backend.get(request.param))
    return request.param


class ToyRuns:
    """Trained toy models shared across test modules, built on first use."""

    seeds = (0, 1, 2)

    def __init__(self):
        from fatq.trainer import make_dataset

        self.data = make_dataset(seed=0)
        self._fp = {}
        self._qat = {}
        self.seconds = 0.0

    def fp(self, seed):
        from fatq.trainer import PRETRAIN_LR, TrainConfig, pretrain

        if seed not in self._fp:
            start = time.perf_counter()
            self._fp[seed] = pretrain(self.data, TrainConfig(lr=PRETRAIN_LR, seed=seed))
            self.seconds += time.perf_counter() - start
        return self._fp[seed]

    def qat(self, seed, mode, bits):
        from fatq.trainer import TrainConfig, finetune

        key = (seed, mode, bits)
        if key not in self._qat:
            cfg = TrainConfig(seed=seed, mode=mode, bits_w=bits, bits_a=bits)
            init = self.fp(seed)[0]
            start = time.perf_counter()
            self._qat[key] = finetune(init, self.data, cfg)
            self.seconds += time.perf_counter() - start
        return self._qat[key]


@pytest.fixture(scope="session")
def toy():
    return ToyRuns()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
