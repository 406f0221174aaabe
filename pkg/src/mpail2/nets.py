"""MLPs, parameter stores, and the shared forward used by every model head.

Layer recipe: ``Linear -> [LayerNorm] -> SiLU`` per hidden layer, then a final
``Linear`` (optionally bias-free) with an optional trailing LayerNorm for
heads whose outputs live in normalized latent space. The same ``mlp_apply``
serves both the traced training path and the plain-numpy inference path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

LN_EPS = 1e-5


class DimensionError(ValueError):
    """Shape mismatch, annotated with the offending layer."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple
    output_dim: int
    use_layernorm: bool = True
    final_bias: bool = True
    final_layernorm: bool = False
    # activation is fixed: SiLU

    def __post_init__(self):
        # hidden may be empty: that degenerates to a single linear layer,
        # used by analytic test stands-in; every model head passes hidden.
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise DimensionError("all MLP dimensions must be >= 1")

    def layer_dims(self):
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


class ParamStore:
    """Named tensors plus their Adam moments.

    One store per model component; every tensor carries first/second moment
    arrays of identical shape and an integer step counter.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step: dict[str, int] = {}
        self._leaves: dict[str, ad.Tensor] = {}

    def add(self, name, array):
        if name in self._tensors:
            raise KeyError(f"tensor {name!r} already exists")
        arr = np.asarray(array, dtype=self.dtype)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} contains non-finite values")
        self._tensors[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self.step[name] = 0

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name):
        return self._tensors[name]

    def __setitem__(self, name, array):
        self.set_(name, array)

    def set_(self, name, array):
        """Overwrite a tensor's values in place (shape-checked)."""
        arr = np.asarray(array, dtype=self.dtype)
        if arr.shape != self._tensors[name].shape:
            raise DimensionError(
                f"tensor {name!r}: shape {arr.shape} != {self._tensors[name].shape}"
            )
        # in-place so cached leaves keep seeing the live values
        np.copyto(self._tensors[name], arr)

    def leaf(self, name):
        """Differentiable leaf Tensor backed by the live parameter array."""
        t = self._leaves.get(name)
        if t is None:
            t = ad.Tensor(self._tensors[name], requires_grad=True, name=name)
            self._leaves[name] = t
        return t

    def copy(self):
        out = ParamStore(self.dtype)
        for name, arr in self._tensors.items():
            out.add(name, arr.copy())
            np.copyto(out.m[name], self.m[name])
            np.copyto(out.v[name], self.v[name])
            out.step[name] = self.step[name]
        return out

    def zero_grads(self):
        return {name: np.zeros_like(arr) for name, arr in self._tensors.items()}


def init_mlp(spec: MlpSpec, rng: np.random.Generator, ensemble: int | None = None,
             dtype=np.float32) -> ParamStore:
    """Fresh parameters, uniform in +-sqrt(1/fan_in) per linear layer.

    ``ensemble`` prepends a member axis to every tensor so the whole ensemble
    evaluates as one stacked matmul.
    """
    store = ParamStore(dtype)
    lead = () if ensemble is None else (ensemble,)

    def uniform(shape, fan_in):
        bound = float(np.sqrt(1.0 / fan_in))
        return rng.uniform(-bound, bound, size=lead + shape)

    dims = spec.layer_dims()
    n_hidden = len(spec.hidden)
    for i, (fin, fout) in enumerate(dims):
        last = i == n_hidden
        prefix = "out" if last else f"l{i}"
        store.add(f"{prefix}.w", uniform((fin, fout), fin))
        if not last or spec.final_bias:
            store.add(f"{prefix}.b", uniform((fout,), fin).reshape(lead + ((1, fout) if lead else (fout,))))
        ln = spec.final_layernorm if last else spec.use_layernorm
        if ln:
            store.add(f"{prefix}.ln_w", np.ones(lead + ((1, fout) if lead else (fout,))))
            store.add(f"{prefix}.ln_b", np.zeros(lead + ((1, fout) if lead else (fout,))))
    return store


def silu(x):
    # composite (not fused): the gradient penalty needs grad-of-grad through it
    return ad.mul(x, ad.sigmoid(x))


def layer_norm(x, gamma, beta, eps=LN_EPS):
    return ad.layer_norm(x, gamma, beta, eps)


def mlp_apply(spec: MlpSpec, store: ParamStore, x, traced=False):
    """Forward pass; ``x`` is (..., input_dim), ndarray or Tensor.

    ``traced=True`` pulls parameters in as differentiable leaves; otherwise
    the straight-line numpy kernel below runs (identical arithmetic, no tape
    overhead).
    """
    if ad.val(x).shape[-1] != spec.input_dim:
        raise DimensionError(
            f"layer l0: expected input dim {spec.input_dim}, got {ad.val(x).shape[-1]}"
        )
    if not traced and not isinstance(x, ad.Tensor):
        return _mlp_np(spec, store, x)
    p = store.leaf if traced else store.__getitem__
    n_hidden = len(spec.hidden)
    for i in range(n_hidden + 1):
        last = i == n_hidden
        prefix = "out" if last else f"l{i}"
        x = ad.matmul(x, p(f"{prefix}.w"))
        if f"{prefix}.b" in store:
            x = ad.add(x, p(f"{prefix}.b"))
        ln = spec.final_layernorm if last else spec.use_layernorm
        if ln:
            x = layer_norm(x, p(f"{prefix}.ln_w"), p(f"{prefix}.ln_b"))
        if not last:
            x = silu(x)
    return x


def _mlp_np(spec: MlpSpec, store: ParamStore, x):
    """Inference kernel: same ops as the traced path, plain numpy."""
    t = store._tensors
    n_hidden = len(spec.hidden)
    for i in range(n_hidden + 1):
        last = i == n_hidden
        prefix = "out" if last else f"l{i}"
        x = np.matmul(x, t[f"{prefix}.w"])
        b = t.get(f"{prefix}.b")
        if b is not None:
            x = x + b
        if spec.final_layernorm if last else spec.use_layernorm:
            x = ad._layer_norm_np(x, t[f"{prefix}.ln_w"], t[f"{prefix}.ln_b"], LN_EPS)[0]
        if not last:
            x = x * ad._sigmoid_np(x)
    return x


def mlp_forward(spec: MlpSpec, store: ParamStore, x):
    """Deterministic inference forward (numpy in, numpy out)."""
    return mlp_apply(spec, store, np.asarray(x, dtype=store.dtype), traced=False)


def grads_for(root, stores, seed_grad=None):
    """Gradients of a tape root for one or more ParamStores.

    Returns a ``{name: ndarray}`` dict per store (single dict when a single
    store is passed); parameters the tape never reached get exact zeros.
    """
    single = isinstance(stores, ParamStore)
    store_list = [stores] if single else list(stores)
    leaves, owners = [], []
    for si, s in enumerate(store_list):
        for name in s.names():
            leaves.append(s.leaf(name))
            owners.append((si, name))
    gmap = ad.backward(root, seed_grad=seed_grad, wrt=leaves)
    results = [{} for _ in store_list]
    for leaf_t, (si, name) in zip(leaves, owners):
        results[si][name] = gmap[leaf_t]
    return results[0] if single else results
