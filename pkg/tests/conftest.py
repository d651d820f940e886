import numpy as np
import pytest
import torch

from novarec.data import MultiBehaviorGraph

BEHAVIORS = ("view", "cart", "purchase")


def random_graph(rng, m, n, k=3, density=0.35, target=None, with_ts=True):
    """Random multi-behavior graph; the last behavior is the target unless told otherwise."""
    edges = []
    for _ in range(k):
        mask = rng.random((m, n)) < density
        us, its = np.nonzero(mask)
        ts = rng.integers(0, 50, size=len(us)) if with_ts else [None] * len(us)
        edges.append(list(zip(us.tolist(), its.tolist(), list(ts))))
    names = tuple(f"b{j}" for j in range(k))
    return MultiBehaviorGraph.from_edges(m, n, names, k - 1 if target is None else target, edges)


@pytest.fixture
def toy_graph():
    # 4 users, 5 items; purchase is the target
    view = [(0, 0, 1), (0, 1, 2), (1, 1, 3), (1, 2, 4), (2, 3, 5), (3, 4, 6), (2, 0, 7)]
    cart = [(0, 0, 8), (1, 2, 9), (3, 3, 10)]
    purchase = [(0, 0, 11), (0, 2, 12), (1, 2, 13), (2, 3, 14), (2, 4, 15), (3, 1, 16)]
    return MultiBehaviorGraph.from_edges(4, 5, BEHAVIORS, "purchase", [view, cart, purchase])


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def record(number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
