import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def finite_diff_grad(target, s, h=1e-4):
    """Central finite differences of the continuous extension of f."""
    s = np.asarray(s, dtype=float)
    grad = np.empty(s.size)
    for i in range(s.size):
        up = s.copy()
        dn = s.copy()
        up[i] += h
        dn[i] -= h
        grad[i] = (target.f(up) - target.f(dn)) / (2 * h)
    return grad


def random_walk_states(lattice, n_steps, rng, max_hop=1):
    """Lattice random walk with occasional repeats, for calibration samples."""
    K = lattice.n_values
    idx = rng.integers(0, K, size=lattice.dim)
    out = [lattice.values[idx]]
    for _ in range(n_steps):
        if rng.random() < 0.15:
            out.append(out[-1])
            continue
        hop = rng.integers(-max_hop, max_hop + 1, size=lattice.dim)
        idx = np.clip(idx + hop, 0, K - 1)
        out.append(lattice.values[idx])
    return np.asarray(out)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
