import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from bsprune.decomposition import decompose_all  # noqa: E402
from bsprune.head import replace_head  # noqa: E402
from bsprune.templates import build_architecture  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = ("tiny_vgg", "tiny_resnet", "tiny_densenet")
FIXTURES = Path(__file__).parent / "fixtures"


def tiny_source(template, num_classes=3, seed=0):
    return build_architecture({"format": 1, "template": template, "num_classes": num_classes}, seed=seed)


def tiny_decomposed(template, num_classes=3, seed=0, s_init=0.5):
    g = replace_head(tiny_source(template, num_classes, seed), num_classes, seed=seed)
    return decompose_all(g, s_init)


def set_s(g, value):
    for n in g:
        if n.kind == "basis_scaling_conv":
            n.params["s"][:] = value
    return g


def randomize_trainables(g, seed):
    """Move trainable parameters (and BN statistics) away from their initial values."""
    rng = np.random.default_rng(seed)
    for n in g:
        if n.kind == "bn":
            n.params["gamma"] = rng.uniform(0.5, 1.5, n.params["gamma"].shape).astype(np.float32)
            n.params["beta"] = rng.normal(0, 0.1, n.params["beta"].shape).astype(np.float32)
            n.params["moving_mean"] = rng.normal(0, 0.1, n.params["moving_mean"].shape).astype(np.float32)
            n.params["moving_var"] = rng.uniform(0.5, 2.0, n.params["moving_var"].shape).astype(np.float32)
        elif n.kind == "basis_scaling_conv":
            n.params["s"] = rng.uniform(0.2, 1.2, n.params["s"].shape).astype(np.float32)
        elif n.kind == "dense":
            n.params["bias"] = rng.normal(0, 0.1, n.params["bias"].shape).astype(np.float32)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- one PASS/FAIL line per acceptance criterion -------------------------------

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    prev = _criteria.get(number, (title, True))
    _criteria[number] = (title, prev[1] and not rep.failed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}")
