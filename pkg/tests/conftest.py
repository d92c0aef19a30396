import pytest

import reference


@pytest.fixture(scope="session")
def trained_reference(request):
    cache_dir = request.config.cache.mkdir("rfdream-reference")
    return reference.load_or_train(cache_dir)


def pytest_terminal_summary(terminalreporter):
    if reference.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in reference.REPORT:
            terminalreporter.write_line(line)
