import pytest

from retime4d.synth import generate, standard_suite

from helpers import tiny_script


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate(tiny_script(), out)
    return out


@pytest.fixture(scope="session")
def suite_dirs(tmp_path_factory):
    """Standard suite datasets by scene name, generated once per session."""
    root = tmp_path_factory.mktemp("suite")
    return {s.name: generate(s, root / s.name) for s in standard_suite()}


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
