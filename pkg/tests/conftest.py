import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ddnet.tensor import Tensor, backward, mul, total  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def analytic_vs_numeric(fn, inputs, seed=0, kink_check=False):
    """Largest relative gap between backward() and central differences for
    every input of ``fn``, using a random linear readout of its output.

    With ``kink_check`` the return value is ``(gap, kinked)``, where
    ``kinked`` says a ReLU or max-pool switch lies inside the difference
    stencil: central differences at the standard step and at a tenth of it
    then disagree with each other, so neither is a valid reference.
    """
    from oracles import central_diff

    ts = [t64(x, True) for x in inputs]
    out = fn(*ts)
    weights = np.random.default_rng(seed + 99).uniform(-1, 1, out.shape)
    loss = total(mul(out, t64(weights))) if out.ndim else out
    backward(loss)
    worst, kinked = 0.0, False
    for i in range(len(inputs)):
        def f(v, i=i):
            args = [t64(a) for a in inputs]
            args[i] = t64(v)
            o = fn(*args).data
            return float((o * weights).sum()) if o.ndim else float(o)
        num = central_diff(f, inputs[i])
        ana = ts[i].grad if ts[i].grad is not None else np.zeros_like(num)
        worst = max(worst, rel_err(ana, num))
        if kink_check and not kinked:
            kinked = rel_err(num, central_diff(f, inputs[i], rel_step=1e-6)) > 1e-6
    return (worst, kinked) if kink_check else worst


def pytest_terminal_summary(terminalreporter):
    from verdicts import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
