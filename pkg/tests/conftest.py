import sys

import numpy as np
import pytest

from pvnas.dataset import TimeSeriesFrame

T0 = np.datetime64("2023-05-01T00:00:00")


def hourly_frame(values, start=T0, names=None, target_index=0):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = names or tuple(f"f{i}" for i in range(values.shape[1]))
    ts = start + np.arange(len(values)) * np.timedelta64(1, "h")
    return TimeSeriesFrame(ts, values, names, target_index)


def minute_frame(values, start=T0, names=None, target_index=0):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = names or tuple(f"f{i}" for i in range(values.shape[1]))
    ts = start + np.arange(len(values)) * np.timedelta64(1, "m")
    return TimeSeriesFrame(ts, values, names, target_index)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
