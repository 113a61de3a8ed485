import sys

import pytest

from xtc.config import ExperimentSpec


def tiny_spec(**changes):
    """A model and task small enough for unit tests to train in well under a second."""
    base = {
        "task.vocab_size": 32, "task.seq_len": 8, "task.num_groups": 8, "task.num_classes": 4,
        "task.n_train": 256, "task.n_val": 64,
        "model.hidden": 16, "model.heads": 2, "model.ffn_dim": 32, "model.teacher_layers": 2,
        "teacher.epochs": 2, "student.layers": 1, "budget.epochs": 1,
    }
    base.update(changes)
    return ExperimentSpec().replace(**base)


@pytest.fixture
def tiny():
    return tiny_spec


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
