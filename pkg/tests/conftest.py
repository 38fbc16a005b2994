import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdtc.tensor import Tape, Tensor

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tape_grads(f, *arrays):
    """Gradients of scalar ``f(*tensors)`` w.r.t. each float64 input array."""
    leaves = [Tensor(np.asarray(a, np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = f(*leaves)
    g = tape.backward(loss)
    return [g[t] for t in leaves]


def numeric_grads(f, *arrays, step=1e-5):
    """Central differences of ``f(*tensors).item()`` at every coordinate."""
    arrays = [np.asarray(a, np.float64) for a in arrays]
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            vals = []
            for d in (step, -step):
                probe = [x.copy() for x in arrays]
                probe[i][idx] += d
                vals.append(f(*[Tensor(p) for p in probe]).item())
            g[idx] = (vals[0] - vals[1]) / (2 * step)
        out.append(g)
    return out


def max_rel_err(a, b, floor=1e-4):
    # below the floor the comparison is absolute; exact-zero adjoints (e.g. key
    # biases under softmax) otherwise compare against pure rounding noise
    a, b = np.asarray(a), np.asarray(b)
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
