import pytest
import torch

_CRITERIA: dict[str, tuple[bool | None, str]] = {}


def pytest_configure(config):
    torch.set_num_threads(1)  # bitwise-reproducible CPU kernels and a fair runtime on small machines


@pytest.fixture(scope="session")
def record_criterion():
    """``record(id, passed, detail)``; ``passed=None`` marks an informational line."""
    def record(cid: str, passed, detail: str):
        _CRITERIA[cid] = (passed, detail)
        print(f"\n{_line(cid, passed, detail)}")
    return record


def _line(cid, passed, detail):
    tag = "INFO" if passed is None else ("PASS" if passed else "FAIL")
    return f"[{tag}] criterion {cid}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: (c.split(".")[0].zfill(3), c)):
        terminalreporter.write_line(_line(cid, *_CRITERIA[cid]))
