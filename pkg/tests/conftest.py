import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from ubna import Model, pretrain  # noqa: E402
from ubna.scenarios import affine_pair_task, domain_shift_task  # noqa: E402


@pytest.fixture(scope="session")
def shift_task():
    return domain_shift_task(0)


@pytest.fixture(scope="session")
def pretrained(shift_task):
    """Model pre-trained on the seed-0 colour-cast task; copy before mutating."""
    model = Model.build(shift_task.architecture, seed=shift_task.model_seed)
    pretrain(model, shift_task.source, shift_task.pretrain)
    return model


@pytest.fixture(scope="session")
def affine_task():
    return affine_pair_task(0)


@pytest.fixture(scope="session")
def affine_pretrained(affine_task):
    model = Model.build(affine_task.architecture, seed=affine_task.model_seed)
    pretrain(model, affine_task.source, affine_task.pretrain)
    return model


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
