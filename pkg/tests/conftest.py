import numpy as np
import pytest

from longseq import autograd as ag
from longseq.autograd import Tensor


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def grad_check(f, x: np.ndarray, rng, eps: float = 1e-5) -> float:
    """Relative error between the tape gradient and central differences.

    ``f`` maps a Tensor to a Tensor; it is reduced against fixed random
    weights so every output element contributes.
    """
    with ag.no_grad():
        shape = f(Tensor(x.copy())).shape
    w = rng.normal(size=shape)

    def scalar(t):
        return ag.sum_(ag.mul(f(t), Tensor(w)))

    xt = Tensor(x.copy(), requires_grad=True)
    scalar(xt).backward()
    fd = ag.finite_diff_grad(scalar, x, eps)
    return rel_err(xt.grad, fd)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance report: one line per criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def accept():
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    lines = [ACCEPTANCE[k] for k in sorted(ACCEPTANCE)]
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    root = terminalreporter.config.rootpath
    (root / "acceptance_report.txt").write_text("\n".join(lines) + "\n")
