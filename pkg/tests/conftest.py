import numpy as np
import pytest

from starseq.data import dataset_from_sequences, split_leave_one_out, synthetic_cycle


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor).

    The floor only matters for entries whose true gradient is zero (the
    difference is then rounding noise of order 1e-11).
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cycle_split():
    return split_leave_one_out(synthetic_cycle())


@pytest.fixture
def tiny_split():
    seqs = [[1, 2, 3, 4, 5], [2, 3, 4], [5, 1, 2, 3], [4, 5, 1, 2, 3, 6], [6, 1, 2]]
    return split_leave_one_out(dataset_from_sequences(seqs, num_items=6))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                lines.append((props["criterion"], f"{outcome[:4].upper()} criterion {props['criterion']}: {props['label']} ({rep.duration:.1f}s)"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
