import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from inffor import attacks, nn  # noqa: E402
from inffor.trainer import TrainConfig, train  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def blobs_run():
    """A small linear model trained on separable 2-D blobs, with its batch log."""
    bundle = attacks.make_clean_dataset(attacks.DataSpec(n=60, n_test=10), seed=3)
    spec = nn.ModelSpec("linear", 2, 2, weight_decay=1e-2)
    cfg = TrainConfig("sgd", 0.1, batch_size=10, epochs=3, seed=1)
    params, store, log = train(spec, bundle.train, cfg)
    return bundle, spec, params, store, log


@pytest.fixture(scope="session")
def mlp_run():
    """A three-class tanh MLP on blobs; 2 checkpoints per epoch."""
    bundle = attacks.make_clean_dataset(attacks.DataSpec(num_classes=3, dim=4, n=45, n_test=9), seed=5)
    spec = nn.ModelSpec("mlp", 4, 3, (5,), "tanh", 1e-3)
    cfg = TrainConfig("adam", 0.02, batch_size=9, epochs=2, subepoch_checkpoints=2, seed=2)
    params, store, log = train(spec, bundle.train, cfg)
    return bundle, spec, params, store, log


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
