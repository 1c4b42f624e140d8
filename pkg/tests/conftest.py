import numpy as np
import pytest

from flowtransfer import nn_core

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_spec():
    # 5 lags / kernel 2 keeps the 4-step LSTM of the full architecture
    return nn_core.NetworkSpec(input_lags=5, input_loops=9, conv_filters=4, conv_kernel=2, lstm_cells=5, dense_units=3)


def perturbed_model(spec, seed, scale=0.3):
    """Random model with nonzero biases so every parameter has a live gradient."""
    model = nn_core.init_model(spec, seed)
    rng = np.random.default_rng(seed + 1000)
    for name, p in model.params.items():
        p += rng.normal(0.0, scale, p.shape)
    return model
