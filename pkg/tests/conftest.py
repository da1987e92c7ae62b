import numpy as np
import pytest

from mscl.dataset import InteractionDataset, generate_synthetic


def central_difference(fn, arrays, h=1e-6):
    """Independent finite-difference oracle: perturbs each entry of ``arrays`` in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = fn()
            flat[j] = orig - h
            down = fn()
            flat[j] = orig
            gflat[j] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def dense_normalized_adjacency(num_users, num_items, pairs):
    """Explicit D^-1/2 A D^-1/2 over the stacked user+item node set."""
    n = num_users + num_items
    adj = np.zeros((n, n))
    for u, i in pairs:
        adj[u, num_users + i] = 1.0
        adj[num_users + i, u] = 1.0
    deg = adj.sum(axis=1)
    inv = np.zeros(n)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    return inv[:, None] * adj * inv[None, :]


def random_dataset(rng, num_users, num_items, density=0.3, with_test=False):
    train, test = [], []
    for _ in range(num_users):
        row = np.flatnonzero(rng.random(num_items) < density)
        if with_test and len(row) > 1:
            held = rng.choice(row, size=max(1, len(row) // 4), replace=False)
            test.append(np.sort(held))
            row = np.setdiff1d(row, held)
        else:
            test.append(np.empty(0, dtype=np.int64))
        train.append(row)
    return InteractionDataset.from_lists(train, test, num_users=num_users, num_items=num_items)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def block_dataset():
    return generate_synthetic(4, 50, 40, 0.3, 0.05, 0.2, rng=np.random.default_rng(7))


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
