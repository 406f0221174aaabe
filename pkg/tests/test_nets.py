import numpy as np
import pytest

from mpail2 import autodiff as ad
from mpail2.checkpoint import load_checkpoint, save_checkpoint
from mpail2.nets import (DimensionError, MlpSpec, ParamStore, grads_for,
                         init_mlp, mlp_apply, mlp_forward, silu)


def test_single_linear_identity():
    spec = MlpSpec(2, (), 2, use_layernorm=False, final_bias=True)
    store = ParamStore()
    store.add("out.w", np.eye(2))
    store.add("out.b", np.zeros(2))
    assert np.array_equal(mlp_forward(spec, store, np.asarray([1.0, 2.0])), [1.0, 2.0])


def test_zero_input_zero_biases_gives_final_bias():
    spec = MlpSpec(2, (4,), 3, use_layernorm=False, final_bias=True)
    store = init_mlp(spec, np.random.default_rng(0))
    store.set_("l0.b", np.zeros(4))
    final_bias = store["out.b"].copy()
    out = mlp_forward(spec, store, np.zeros(2))
    assert np.array_equal(out, final_bias)


def _forward_oracle(store, x, use_ln, final_ln, final_bias, n_hidden):
    # independent re-implementation: explicit loops, float64
    h = np.asarray(x, dtype=np.float64)
    for i in range(n_hidden + 1):
        last = i == n_hidden
        p = "out" if last else f"l{i}"
        w = store[f"{p}.w"].astype(np.float64)
        h = h @ w
        if not last or final_bias:
            h = h + store[f"{p}.b"].astype(np.float64)
        if (final_ln if last else use_ln):
            g = store[f"{p}.ln_w"].astype(np.float64)
            b = store[f"{p}.ln_b"].astype(np.float64)
            mu = h.mean(-1, keepdims=True)
            var = ((h - mu) ** 2).mean(-1, keepdims=True)
            h = (h - mu) / np.sqrt(var + 1e-5) * g + b
        if not last:
            h = h / (1 + np.exp(-h)) * 1.0  # SiLU
    return h


@pytest.mark.parametrize("use_ln,final_ln", [(False, False), (True, False), (True, True)])
def test_random_net_matches_scripted_forward(use_ln, final_ln):
    spec = MlpSpec(4, (8,), 2, use_layernorm=use_ln, final_bias=True,
                   final_layernorm=final_ln)
    store = init_mlp(spec, np.random.default_rng(123))
    x = np.random.default_rng(7).normal(size=(5, 4)).astype(np.float32)
    got = mlp_forward(spec, store, x)
    want = _forward_oracle(store, x, use_ln, final_ln, True, 1)
    assert np.allclose(got, want, atol=1e-6)


def test_traced_and_inference_paths_agree_bitwise():
    spec = MlpSpec(4, (8, 8), 3, use_layernorm=True, final_bias=True,
                   final_layernorm=True)
    store = init_mlp(spec, np.random.default_rng(5))
    x = np.random.default_rng(1).normal(size=(6, 4)).astype(np.float32)
    fast = mlp_apply(spec, store, x, traced=False)
    traced = mlp_apply(spec, store, x, traced=True)
    assert np.array_equal(fast, traced.data)


def test_dimension_mismatch_names_layer():
    spec = MlpSpec(4, (8,), 2)
    store = init_mlp(spec, np.random.default_rng(0))
    with pytest.raises(DimensionError, match="l0"):
        mlp_forward(spec, store, np.zeros(3))


def test_forward_deterministic():
    spec = MlpSpec(4, (8,), 2)
    store = init_mlp(spec, np.random.default_rng(0))
    x = np.random.default_rng(2).normal(size=(3, 4)).astype(np.float32)
    assert np.array_equal(mlp_forward(spec, store, x), mlp_forward(spec, store, x))


def test_gradient_matches_finite_differences_through_ln_silu_stack():
    spec = MlpSpec(3, (6, 6), 1, use_layernorm=True, final_bias=True)
    store = init_mlp(spec, np.random.default_rng(9), dtype=np.float64)
    x = np.random.default_rng(3).normal(size=(4, 3))

    def loss_value():
        return float(np.sum(mlp_apply(spec, store, x) ** 2))

    out = mlp_apply(spec, store, x, traced=True)
    grads = grads_for(ad.sum_(ad.square(out)), store)

    eps, worst = 1e-4, 0.0
    rng = np.random.default_rng(0)
    for name in store.names():
        flat = store[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_value()
            flat[i] = old - eps
            lm = loss_value()
            flat[i] = old
            fd = (lp - lm) / (2 * eps)
            an = grads[name].reshape(-1)[i]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
    assert worst <= 1e-3


def test_unused_head_parameters_get_zero_gradient():
    spec = MlpSpec(3, (4,), 2)
    used = init_mlp(spec, np.random.default_rng(0))
    unused = init_mlp(spec, np.random.default_rng(1))
    out = mlp_apply(spec, used, np.ones((2, 3), dtype=np.float32), traced=True)
    used_grads, unused_grads = grads_for(ad.sum_(out), [used, unused])
    assert any(np.any(g != 0) for g in used_grads.values())
    assert all(np.array_equal(g, np.zeros_like(g)) for g in unused_grads.values())


def test_init_bounds_follow_fan_in():
    spec = MlpSpec(16, (64,), 4)
    store = init_mlp(spec, np.random.default_rng(0))
    assert np.max(np.abs(store["l0.w"])) <= np.sqrt(1 / 16)
    assert np.max(np.abs(store["out.w"])) <= np.sqrt(1 / 64)
    assert np.array_equal(store["l0.ln_w"], np.ones(64, dtype=np.float32))


def test_ensemble_init_members_differ_and_stack():
    spec = MlpSpec(6, (8,), 1)
    store = init_mlp(spec, np.random.default_rng(0), ensemble=3)
    assert store["l0.w"].shape == (3, 6, 8)
    assert store["l0.b"].shape == (3, 1, 8)
    assert not np.array_equal(store["l0.w"][0], store["l0.w"][1])
    x = np.random.default_rng(4).normal(size=(3, 5, 6)).astype(np.float32)
    out = mlp_apply(spec, store, x)
    for m in range(3):
        member = ParamStore()
        for name in spec_names(store):
            member.add(name, store[name][m] if store[name].ndim == 3 else store[name][m])
        got = mlp_apply(spec, member, x[m])
        assert np.allclose(out[m], got, atol=1e-6)


def spec_names(store):
    return store.names()


def test_param_store_rejects_non_finite():
    store = ParamStore()
    with pytest.raises(ValueError, match="non-finite"):
        store.add("w", np.asarray([1.0, np.nan]))


def test_silu_zero_point():
    assert silu(np.asarray([0.0], dtype=np.float32))[0] == 0.0


def test_checkpoint_round_trip_bit_exact(tmp_path):
    spec = MlpSpec(5, (7,), 3, final_layernorm=True)
    a = init_mlp(spec, np.random.default_rng(0))
    b = init_mlp(spec, np.random.default_rng(1))
    a.m["l0.w"][:] = 0.25  # nontrivial optimizer state
    a.step["l0.w"] = 17
    save_checkpoint(tmp_path / "ck", {"a": a, "b": b}, meta={"note": 1})
    stores, meta = load_checkpoint(tmp_path / "ck")
    assert meta["note"] == 1
    for name in a.names():
        assert np.array_equal(stores["a"][name], a[name])
        assert stores["a"][name].dtype == np.float32
        assert np.array_equal(stores["a"].m[name], a.m[name])
        assert stores["a"].step[name] == a.step[name]
    for name in b.names():
        assert np.array_equal(stores["b"][name], b[name])


def test_checkpoint_manifest_schema(tmp_path):
    import json

    spec = MlpSpec(2, (3,), 1)
    save_checkpoint(tmp_path / "ck", {"m": init_mlp(spec, np.random.default_rng(0))})
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert all(set(e) == {"name", "shape", "dtype"} for e in manifest)
    assert all(e["dtype"] == "f32" for e in manifest)
    entry = next(e for e in manifest if e["name"] == "m/l0.w")
    assert entry["shape"] == [2, 3]
    # one raw little-endian binary per tensor
    raw = (tmp_path / "ck" / "tensors" / "m_l0.w.bin").read_bytes()
    assert len(raw) == 2 * 3 * 4
