import sys

import numpy as np
import pytest

from lmm.dataset import SynthSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(20170401)


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic(SynthSpec(2, 2, 4, 0.5, 5.0, 10, seed=3))


def central_difference(f, params, h=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of each array in ``params``.

    Arrays are perturbed in place and restored.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = f()
            p[i] = old - h
            fm = f()
            p[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-4):
    """Largest entrywise |a-b| / max(|a|, |b|, floor); the floor keeps near-zero entries from dominating."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.format_results():
        terminalreporter.write_line(line)
