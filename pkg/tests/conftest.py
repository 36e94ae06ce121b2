from collections import OrderedDict

import numpy as np
import pytest
import torch
import torch.nn as nn

from bia.data import NormStats
from bia.models import Classifier

torch.set_num_threads(1)


def tiny_classifier(dtype=torch.float64, seed=0, class_count=3, stats=NormStats()) -> Classifier:
    """Two smooth conv layers; small enough for finite differences."""
    torch.manual_seed(seed)
    stages = OrderedDict(
        stage1=nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.Tanh()),
        stage2=nn.Sequential(nn.Conv2d(4, 5, 3, stride=2, padding=1), nn.Tanh()),
    )
    head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(5, class_count))
    return Classifier("tiny", stages, head, class_count, stats).to(dtype).eval()


@pytest.fixture
def tiny():
    return tiny_classifier()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict[int, list[tuple[str, str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.setdefault(marker.args[0], []).append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        ok = all(outcome == "passed" for _, outcome in results)
        names = ", ".join(f"{name}={outcome}" for name, outcome in results)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  ({names})")
