import numpy as np
import pytest

from mlora.data import SynthConfig, gen_synthetic, split
from mlora.model import build_model
from mlora.numerics import Rng


@pytest.fixture(scope="session")
def synth_splits():
    ds = gen_synthetic(SynthConfig(n_samples=2000, seed=11))
    return ds, split(ds, seed=11)


@pytest.fixture
def small_model(synth_splits):
    ds, _ = synth_splits
    return build_model(ds.schema, [8, 4], 4, "mlp", 4, Rng(0))


def random_batch(schema, n, seed):
    rng = np.random.default_rng(seed)
    idx = np.stack([rng.integers(0, v, n) for _, v in schema.fields], axis=1)
    return idx, rng.integers(0, schema.n_domains, n)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
