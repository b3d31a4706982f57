import pytest

from esanet.kernels import backend

ACCEPTANCE_LINES: list[str] = []


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run the multi-hour toy training criteria")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="slow toy training run; enable with --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=["python", "compiled"])
def kernel_backend(request):
    if request.param == "compiled" and backend.compiled_impl is None:
        pytest.skip("compiled kernels not built")
    previous = backend.NAME
    backend.use(request.param)
    yield request.param
    backend.use(previous)
