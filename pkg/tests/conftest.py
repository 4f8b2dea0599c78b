import pytest

from hallguard.evaluation.corpus import standard_corpus
from hallguard.training import default_model


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def corpus():
    """A small held-out corpus, disjoint from the default model's training seed."""
    return standard_corpus(101, 25, 4)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import lines

    summary = lines()
    if summary:
        terminalreporter.section("acceptance criteria")
        for line in summary:
            terminalreporter.write_line(line)
