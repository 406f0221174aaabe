import numpy as np
import pytest

from mpail2.models import ModelBundle


@pytest.fixture
def tiny_bundle():
    """Small f32 bundle: obs 4, act 2, latent 8, hidden (12,12), H=3, M=2."""
    return ModelBundle(4, 2, 8, (12, 12), 3, 2, seed=11)


@pytest.fixture
def tiny_bundle_f64():
    return ModelBundle(4, 2, 8, (12, 12), 3, 2, seed=11, dtype=np.float64)


def finite_difference_grads(loss_fn, arrays, eps=1e-4, samples_per_tensor=4, seed=0):
    """Central finite differences of ``loss_fn()`` w.r.t. entries of ``arrays``.

    arrays: {name: ndarray} mutated in place during probing.
    Returns {name: [(flat_index, fd_grad)]}.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        idxs = rng.choice(flat.size, size=min(samples_per_tensor, flat.size), replace=False)
        probes = []
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn()
            flat[i] = old - eps
            lm = loss_fn()
            flat[i] = old
            probes.append((int(i), (lp - lm) / (2 * eps)))
        out[name] = probes
    return out


def max_rel_error(grads, fd_probes):
    worst = 0.0
    for name, probes in fd_probes.items():
        g = grads[name].reshape(-1)
        for i, fd in probes:
            worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-6))
    return worst
