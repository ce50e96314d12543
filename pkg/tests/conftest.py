import pytest

from ttmerge.bench import ScenarioParams, gen_scenario

PINNED_SEED = 42


@pytest.fixture(scope="session")
def scenario():
    """The shipped seed-42 scenario with trained checkpoints."""
    return gen_scenario(PINNED_SEED, ScenarioParams())


@pytest.fixture(scope="session")
def tiny_scenario():
    prm = ScenarioParams(n_pretrain_per_class=40, n_expert_per_class=30, n_test=100, n_novel=60)
    return gen_scenario(7, prm)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
