import numpy as np
import pytest

from spurscope import datagen as dg
from spurscope.models import ModelSpec, build_model, reference_spec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cnn_spec():
    return ModelSpec([{"type": "conv", "out": 3, "k": 3, "pad": 1}, {"type": "relu"},
                      {"type": "maxpool", "k": 2},
                      {"type": "conv", "out": 2, "k": 3}, {"type": "relu"},
                      {"type": "flatten"}, {"type": "dense", "out": 2}], (1, 8, 8), 2)


@pytest.fixture
def patched_glyphs():
    base = dg.gen_glyphs(2, 60, 28, seed=3)
    return dg.inject_patch(base, dg.SpuriousSpec(size=5), 1.0, seed=3)


@pytest.fixture
def small_cnn():
    return build_model(reference_spec("cnn-small", (1, 28, 28), 2), 0)


# -- acceptance summary ------------------------------------------------------------------

_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL/SKIP line; lines are echoed immediately and in the summary."""
    def record(tag, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"{status} criterion {tag}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
