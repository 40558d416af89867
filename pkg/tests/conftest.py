import numpy as np
import pytest
import torch

from scoremd.basis import BasisSpec
from scoremd.egt import EgtModel

torch.set_num_threads(1)


def small_model(seed=0, n_layers=2, feature_dim=8, heads=2, hidden=16, cutoff=3.0, dropout=0.0):
    torch.manual_seed(seed)
    return EgtModel(feature_dim=feature_dim, n_layers=n_layers, heads=heads, hidden=hidden,
                    dropout=dropout, basis=BasisSpec(cutoff=cutoff), time_freqs=2)


def spread_positions(rng, n, scale=1.0):
    """Random positions with no pair closer than 0.3 * scale."""
    while True:
        x = rng.normal(size=(n, 3)) * scale
        d = np.linalg.norm(x[:, None] - x[None], axis=-1) + np.eye(n)
        if d.min() > 0.3 * scale:
            return x


@pytest.fixture
def model():
    return small_model().eval()


_acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _acceptance[mark.args[0]] = (status, mark.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(_acceptance):
        status, title = _acceptance[k]
        terminalreporter.write_line(f"{status}  #{k:<2} {title}")
