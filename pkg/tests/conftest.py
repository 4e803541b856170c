import numpy as np
import pytest
import torch


def central_difference(f, x: torch.Tensor, h: float = 1e-4, indices=None) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. entries of ``x`` (perturbed in place)."""
    flat = x.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = []
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    def record(number, title, passed, detail=""):
        ACCEPTANCE[number] = (title, bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")
