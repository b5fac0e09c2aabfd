import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


# --------------------------------------------------------------------------
# acceptance criteria report: one line per criterion, printed live and again
# in the terminal summary so it survives output capture


_ACCEPTANCE: list[tuple[str, bool, str]] = []


class _Criterion:
    def __init__(self, name: str, capsys):
        self.name = name
        self.detail = ""
        self._capsys = capsys

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        _ACCEPTANCE.append((self.name, ok, detail))
        with self._capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {self.name}: {detail}")
        return False


@pytest.fixture
def criterion(capsys):
    return lambda name: _Criterion(name, capsys)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    passed = sum(ok for _, ok, _ in _ACCEPTANCE)
    terminalreporter.write_line(f"{passed}/{len(_ACCEPTANCE)} criteria passed")
