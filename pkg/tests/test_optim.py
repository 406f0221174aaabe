import numpy as np
import pytest

from mpail2.nets import DimensionError, MlpSpec, ParamStore, init_mlp
from mpail2.optim import (NonFiniteGradientError, adam_step, clip_grad_norm,
                          global_grad_norm, polyak_update)


def _store_with(w):
    store = ParamStore()
    store.add("w", np.asarray(w, dtype=np.float32))
    return store


def test_zero_gradients_leave_parameters_unchanged():
    store = _store_with([1.0, -2.0, 3.0])
    before = store["w"].copy()
    adam_step(store, {"w": np.zeros(3, dtype=np.float32)}, lr=1e-3)
    assert np.array_equal(store["w"], before)


def test_first_step_magnitude_is_learning_rate():
    store = _store_with([0.0, 0.0])
    g = np.asarray([0.3, -7.0], dtype=np.float32)
    adam_step(store, {"w": g}, lr=1e-3)
    # bias-corrected first step: lr * g / (|g| + eps) ~= lr * sign(g)
    assert np.allclose(np.abs(store["w"]), 1e-3, rtol=1e-4)
    assert np.all(np.sign(store["w"]) == -np.sign(g))


def _adam_oracle(w0, grads_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    # independent scripted Adam in float64
    w = float(w0)
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grads_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_hundred_steps_on_quadratic_match_scripted_oracle():
    store = _store_with([0.0])
    traj = []
    for _ in range(100):
        w = float(store["w"][0])
        adam_step(store, {"w": np.asarray([2 * (w - 5.0)], dtype=np.float32)}, lr=3e-4)
        traj.append(float(store["w"][0]))
    assert all(b > a for a, b in zip(traj, traj[1:]))  # monotone toward 5
    want = _adam_oracle(0.0, lambda w: 2 * (w - 5.0), 3e-4, 100)
    assert traj[-1] == pytest.approx(want, abs=1e-5)


def test_non_finite_gradient_aborts_whole_update_and_names_tensor():
    store = ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.ones(2))
    before_a = store["a"].copy()
    grads = {"a": np.ones(2, dtype=np.float32),
             "b": np.asarray([1.0, np.inf], dtype=np.float32)}
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        adam_step(store, grads, lr=1e-3)
    assert np.array_equal(store["a"], before_a)
    assert store.step["a"] == 0


def test_adam_is_bit_deterministic():
    def run():
        store = _store_with([[0.5, -0.25], [1.5, 0.0]])
        for t in range(10):
            g = np.full((2, 2), 0.1 * (t + 1), dtype=np.float32)
            adam_step(store, {"w": g}, lr=3e-4)
        return store["w"].copy()

    assert np.array_equal(run(), run())


def test_clip_noop_below_threshold():
    g = {"w": np.asarray([1.2, 1.6], dtype=np.float32)}  # norm 2.0
    before = g["w"].copy()
    clip_grad_norm(g, 5.0)
    assert np.array_equal(g["w"], before)


def test_clip_scales_by_half():
    g = {"w": np.asarray([6.0, 8.0], dtype=np.float32)}  # norm 10
    clip_grad_norm(g, 5.0)
    assert np.allclose(g["w"], [3.0, 4.0])


def test_clip_norm_equals_min_of_norm_and_max():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = {f"t{i}": rng.normal(size=(3, 4)).astype(np.float32) for i in range(3)}
        norm0 = global_grad_norm(g)
        max_norm = float(rng.uniform(0.1, 2 * norm0))
        direction = np.concatenate([v.reshape(-1) for v in g.values()])
        clip_grad_norm(g, max_norm)
        after = np.concatenate([v.reshape(-1) for v in g.values()])
        assert global_grad_norm(g) == pytest.approx(min(norm0, max_norm), rel=1e-6)
        cos = float(direction @ after / (np.linalg.norm(direction) * np.linalg.norm(after)))
        assert cos == pytest.approx(1.0, abs=1e-6)


def test_clip_rejects_non_positive_max():
    with pytest.raises(ValueError):
        clip_grad_norm({"w": np.ones(2)}, 0.0)


def test_polyak_coeff_one_copies_exactly():
    spec = MlpSpec(3, (4,), 2)
    online = init_mlp(spec, np.random.default_rng(0))
    target = init_mlp(spec, np.random.default_rng(1))
    polyak_update(target, online, 1.0)
    for name in online.names():
        assert np.array_equal(target[name], online[name])


def test_polyak_coeff_zero_is_noop():
    spec = MlpSpec(3, (4,), 2)
    online = init_mlp(spec, np.random.default_rng(0))
    target = init_mlp(spec, np.random.default_rng(1))
    before = {n: target[n].copy() for n in target.names()}
    polyak_update(target, online, 0.0)
    for name in online.names():
        assert np.array_equal(target[name], before[name])


def test_polyak_affine_formula():
    target = _store_with([0.0])
    online = _store_with([1.0])
    polyak_update(target, online, 0.01)
    assert target["w"][0] == pytest.approx(0.01)


def test_polyak_is_a_contraction():
    target = _store_with(np.zeros(4))
    online = _store_with(np.full(4, 2.0))
    gap0 = 2.0
    for k in range(1, 50):
        polyak_update(target, online, 0.01)
        gap = float(np.max(np.abs(target["w"] - online["w"])))
        assert gap <= (1 - 0.01) ** k * gap0 + 1e-6


def test_polyak_shape_mismatch_raises():
    a = _store_with(np.zeros(3))
    b = _store_with(np.zeros(4))
    with pytest.raises(DimensionError):
        polyak_update(a, b, 0.5)
