import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small shapes-world dataset shared across tests."""
    from lsrseg.synthdata import build_splits

    root = tmp_path_factory.mktemp("shapes")
    build_splits(root, seed=11, sizes={"source-train": 24, "source-val": 24, "target-train": 12,
                                        "target-val": 12, "target-test": 12})
    return root


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
