import pytest

from hyolo.synthdata import GenConfig, generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Depth-3 dataset with 8 train / 4 val / 4 test scenes."""
    cfg = GenConfig(depth=3, train=8, val=4, test=4, seed=0)
    return generate_dataset(cfg, tmp_path_factory.mktemp("data") / "tiny")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; printed in the terminal summary."""
    def record(n, ok, detail, status=None):
        status = status or ("PASS" if ok else "FAIL")
        ACCEPTANCE_LINES.append(f"criterion {n:>2}: {status}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
