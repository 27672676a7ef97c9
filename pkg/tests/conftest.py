import numpy as np
import pytest

from exitlab.core import Rng
from exitlab.data import SyntheticSpec, gen_synthetic, split_standardize
from exitlab.model import CONTINUE, EXIT, BackboneConfig, ModelBundle

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): exit criterion, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _ACCEPTANCE.append((marker.args[0], rep.outcome, getattr(item, "_detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split(".")[0])):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] {label}" + (f"  ({detail})" if detail else ""))


def set_policy(m, t, p_exit):
    """Make layer t's policy output a constant exit probability."""
    head = m.policies[t - 1]
    for par in head.params:
        par.values[...] = 0.0
    if p_exit in (0.0, 1.0):
        logit = -50.0 if p_exit == 0.0 else 50.0
    else:
        logit = np.log(p_exit / (1 - p_exit))
    head.out.b.values[EXIT] = logit
    head.out.b.values[CONTINUE] = 0.0


@pytest.fixture
def set_exit_prob():
    return set_policy


@pytest.fixture
def tiny_config():
    return BackboneConfig(input_dim=3, num_classes=3, num_layers=4, hidden_dim=5, policy_hidden_dim=4)


@pytest.fixture
def tiny_model(tiny_config):
    return ModelBundle(tiny_config, Rng(11))


@pytest.fixture(scope="session")
def small_splits():
    ds = gen_synthetic(SyntheticSpec(n=600, feature_dim=4), seed=3)
    return split_standardize(ds, (0.7, 0.15, 0.15), seed=3)
