import numpy as np
import pytest

from robal.autodiff import Tensor


def central_diff(fn, x, h=1e-6):
    """Central differences of scalar ``fn(ndarray) -> float``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x.copy())
        flat[i] = orig - h
        fm = fn(x.copy())
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def check_grads(build, inputs, h=1e-6):
    """Max relative error between autodiff and central differences of ``build(*tensors)``.

    ``build`` returns a scalar Tensor; every array in ``inputs`` is differentiated.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    out = build(*tensors)
    out.backward()
    worst = 0.0
    for k, a in enumerate(inputs):
        def f(v, k=k):
            args = [Tensor(b.copy()) for b in inputs]
            args[k] = Tensor(v)
            return float(build(*args).data)
        worst = max(worst, rel_err(tensors[k].grad, central_diff(f, a, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one "criterion N: PASS/FAIL ..." line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
