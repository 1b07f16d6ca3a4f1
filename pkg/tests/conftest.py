import os
from pathlib import Path

import pytest
import torch

from tforge import attacks, data, models, training

torch.set_num_threads(max(1, os.cpu_count() or 1))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def blobs():
    return data.synthetic_blobs(n_train=2000, n_test=600, seed=0)


@pytest.fixture(scope="session")
def patch_spec():
    return attacks.TriggerSpec.load(FIXTURES / "patch_tiny" / "trigger.json")


@pytest.fixture(scope="session")
def patch_model():
    """Fixed tiny_cnn with a 3x3 patch backdoor to label 3 (see fixtures/make_toy_checkpoint.py)."""
    return models.freeze(training.Checkpoint.load(FIXTURES / "patch_tiny").model())


@pytest.fixture(scope="session")
def defense(blobs):
    return data.sample_defense_set(blobs[1], 5, seed=0)


@pytest.fixture(scope="session")
def eval_set(blobs, defense):
    return data.heldout(blobs[1], defense)


class ConstantModel(torch.nn.Module):
    """Ignores its input and always favours ``label``; h keeps a real spatial map."""

    def __init__(self, label=0, k=10, c=3, hw=8):
        super().__init__()
        self.num_classes = k
        self.input_shape = (c, hw, hw)
        self.intermediate_shape = (4, hw // 2, hw // 2)
        self.h = torch.nn.Sequential(torch.nn.Conv2d(c, 4, 3, padding=1), torch.nn.AvgPool2d(2))
        bias = torch.full((k,), -5.0)
        bias[label] = 5.0
        self.g = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(4 * (hw // 2) ** 2, k))
        with torch.no_grad():
            self.g[1].weight.zero_()
            self.g[1].bias.copy_(bias)

    def forward(self, x):
        return self.g(self.h(x))


@pytest.fixture
def constant_model():
    return ConstantModel


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def accept(request, capsys):
    """Record one PASS/FAIL line for an acceptance criterion and fail the test on FAIL."""

    def record(number, title, ok, detail):
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'} {title}: {detail}"
        request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
        with capsys.disabled():
            print(f"\n{line}")
        if not ok:
            pytest.fail(line, pytrace=False)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines):
            terminalreporter.write_line(line)
