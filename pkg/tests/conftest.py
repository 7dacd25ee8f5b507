import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from earlyexit.engine import MatchSpec  # noqa: E402
from earlyexit.fixtures import planted_fixture  # noqa: E402
from earlyexit.model import ModelConfig  # noqa: E402
from earlyexit.planted import build_random_model  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def planted():
    """N=8, plant at 5: (model, task, examples)."""
    return planted_fixture(n_layers=8, plant_layer=5, seed=0, per_class=9)


@pytest.fixture(scope="session")
def adversarial():
    """N=8, plant at 5, layer 7 flips the single example with key 9."""
    return planted_fixture(n_layers=8, plant_layer=5, seed=0, per_class=9, distractor_layer=7)


@pytest.fixture(scope="session")
def toy_model():
    cfg = ModelConfig(n_layers=4, d_model=16, n_heads=4, d_ff=32, vocab_size=12, max_seq=16)
    return build_random_model(cfg, seed=3)


@pytest.fixture(scope="session")
def covering_spec(toy_model):
    """Every vocab token maps to one of four classes."""
    v = toy_model.config.vocab_size
    classes = tuple(f"c{i}" for i in range(4))
    labels = {c: tuple((t,) for t in range(v) if t % 4 == i) for i, c in enumerate(classes)}
    return MatchSpec("cover", classes, labels)


# acceptance summary ---------------------------------------------------------

_acceptance = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
