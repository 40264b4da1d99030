import sys
import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def central_difference(fn, tensors, h=1e-6, max_coords=None, rng=None):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor (perturbed in place).

    Returns a list of ``(numeric, index)`` where ``index`` lists the flat
    coordinates that were probed.
    """
    out = []
    for t in tensors:
        flat = t.data.view(-1)
        coords = np.arange(flat.numel())
        if max_coords is not None and len(coords) > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(coords, max_coords, replace=False)
        num = np.zeros(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn().detach())
            flat[i] = orig - h
            down = float(fn().detach())
            flat[i] = orig
            num[n] = (up - down) / (2 * h)
        out.append((num, coords))
    return out


def grad_rel_error(fn, tensors, **kw):
    """Max-norm relative error between autograd and central differences."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t, (num, coords) in zip(tensors, central_difference(fn, tensors, **kw)):
        ana = t.grad.detach().reshape(-1).numpy()[coords]
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-10)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running benchmark (minutes)")


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance gate, one line per criterion that ran."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
