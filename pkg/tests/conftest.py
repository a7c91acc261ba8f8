import numpy as np
import pytest

from ickan import autodiff as ad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_param_check(params, loss, rng, h=1e-6, entries=8):
    """Worst relative error of reverse-mode parameter gradients vs central differences.

    ``loss(tape)`` returns a scalar Var when ``tape`` is a Tape and a float when None.
    """
    tape = ad.Tape()
    grads = ad.backward(tape, loss(tape))
    worst = 0.0
    for p in params:
        g = grads.get(p, np.zeros_like(p.value)).reshape(-1)
        flat = p.value.reshape(-1)
        idx = rng.choice(flat.size, size=min(entries, flat.size), replace=False)
        fd = np.empty(len(idx))
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            up = float(loss(None))
            flat[i] = old - h
            down = float(loss(None))
            flat[i] = old
            fd[n] = (up - down) / (2 * h)
        scale = max(np.linalg.norm(fd), np.linalg.norm(g[idx]), 1e-4)
        worst = max(worst, float(np.linalg.norm(g[idx] - fd) / scale))
    return worst


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report(capsys):
    """Record one PASS/FAIL line per acceptance criterion (echoed in the terminal summary)."""

    def report(number: int, passed: bool, detail: str):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2d}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
