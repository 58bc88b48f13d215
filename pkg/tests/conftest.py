import numpy as np
import pytest

from echokv.cache import EchoConfig
from echokv.corpus import split_heldout, synthetic_text, tokenize
from echokv.kernel import AttentionGeometry
from echokv.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def desk_model():
    return init_model(ModelConfig())


@pytest.fixture(scope="session")
def tiny_model():
    """Four layers, d_head 4: small enough for float64 finite differences."""
    return init_model(ModelConfig(n_layers=4, geometry=AttentionGeometry(4, 2, 4), d_model=16, d_ff=32, seed=3))


@pytest.fixture(scope="session")
def docs():
    return [tokenize(t)[:512] for t in synthetic_text(n_docs=12, min_chars=300, seed=1)]


@pytest.fixture(scope="session")
def split(docs):
    return split_heldout(docs)


@pytest.fixture
def echo_cfg():
    return EchoConfig(2, 16, 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            name = rep.nodeid.rsplit("::", 1)[-1]
            if name.startswith("test_criterion_") and rep.when == "call":
                lines.append((name, "PASS" if status == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance")
        for name, verdict in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {name[len('test_criterion_'):]}")
