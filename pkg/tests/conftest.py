import pytest
from hypothesis import settings

from fusionseg.optim import make_rng

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return make_rng(1234)



def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(k for k in lines if isinstance(k, int)):
        terminalreporter.write_line(lines[key])
