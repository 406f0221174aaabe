"""Adam, global gradient-norm clipping, and polyak target averaging."""

from __future__ import annotations

import numpy as np

from .nets import DimensionError, ParamStore

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteGradientError(RuntimeError):
    """A gradient tensor contained nan/inf; the update was aborted."""

    def __init__(self, tensor_name):
        self.tensor_name = tensor_name
        super().__init__(f"non-finite gradient for tensor {tensor_name!r}; update aborted")


def adam_step(params: ParamStore, grads: dict, lr: float,
              betas=ADAM_BETAS, eps=ADAM_EPS) -> None:
    """One bias-corrected Adam update, in place.

    The whole update aborts (no tensor is touched) if any gradient is
    non-finite.
    """
    b1, b2 = betas
    for name in params.names():
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    for name in params.names():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=params.dtype)
        m, v = params.m[name], params.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params.step[name] += 1
        t = params.step[name]
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        w = params[name]
        w -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(params.dtype)


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(grads: dict, max_norm: float) -> dict:
    """Scale gradients so their global L2 norm is at most ``max_norm``.

    No-op when already below; direction is preserved. Returns the same dict.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = (grads[name] * scale).astype(grads[name].dtype)
    return grads


def polyak_update(target: ParamStore, online: ParamStore, coeff: float) -> None:
    """target <- (1 - coeff) * target + coeff * online, elementwise."""
    if not 0.0 <= coeff <= 1.0:
        raise ValueError("polyak coefficient must be in [0, 1]")
    if target.names() != online.names():
        raise DimensionError("target and online stores have different tensor names")
    for name in target.names():
        t, o = target[name], online[name]
        if t.shape != o.shape:
            raise DimensionError(f"tensor {name!r}: target {t.shape} != online {o.shape}")
        t *= 1.0 - coeff
        t += coeff * o
