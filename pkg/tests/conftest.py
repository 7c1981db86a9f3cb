import copy

import pytest

from uavmesh.config import config_from_dict

TINY = {
    "scenario": {"side_length": 1000.0, "n_uav": 3, "n_ue": 8, "n_bs": 1, "horizon": 20},
    "training": {"n_episodes": 2, "hidden": 8, "k_epochs": 1, "minibatch_size": 32,
                 "eval_every": 0, "trace_every": 1, "checkpoint_every": 1},
    "advisor": {"q_llm": 10},
}


@pytest.fixture
def tiny_dict():
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_cfg(tiny_dict):
    return config_from_dict(tiny_dict)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines.append((number, line))
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
