"""Adversarial state-transition reward with a gradient penalty.

The reward scores latent pairs (z, z') only: no actions, matching the
observation-only setting. The head carries no LayerNorm and its final linear
has no bias, so outputs are unbounded raw scores. Minimizing the loss pushes
demonstration scores up and learner scores down; a penalty on the
input-gradient norm of uniformly interpolated learner/demo pairs keeps the
score field approximately 1-Lipschitz.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nets import MlpSpec, grads_for, init_mlp, mlp_apply

# keeps the norm differentiable at zero without visibly shifting the penalty
GP_NORM_EPS = 1e-16


class RewardModel:
    def __init__(self, latent_dim, hidden, rng, dtype=np.float32):
        self.latent_dim = int(latent_dim)
        self.spec = MlpSpec(2 * latent_dim, hidden, 1, use_layernorm=False,
                            final_bias=False)
        self.store = init_mlp(self.spec, rng, dtype=dtype)
        self.dtype = np.dtype(dtype)

    def score_pairs_traced(self, x):
        """Traced score of concatenated pairs, (..., 2L) -> (...,)."""
        out = mlp_apply(self.spec, self.store, x, traced=True)
        return ad.reshape(out, ad.val(out).shape[:-1])

    def score(self, z, z_next):
        """Inference score, (..., L) x (..., L) -> (...,)."""
        x = np.concatenate(
            [np.asarray(z, dtype=self.dtype), np.asarray(z_next, dtype=self.dtype)],
            axis=-1,
        )
        out = mlp_apply(self.spec, self.store, x)
        return out.reshape(out.shape[:-1])

    def score_traced(self, z, z_next):
        x = ad.concat([z, z_next], axis=-1)
        out = mlp_apply(self.spec, self.store, x, traced=True)
        return ad.reshape(out, ad.val(out).shape[:-1])


def interpolate_pairs(learner_x, demo_x, rng, dtype=np.float32):
    """u * learner + (1-u) * demo with one shared u per matched pair.

    Batches are shuffled independently before being zipped index-wise.
    """
    learner_x = np.asarray(learner_x, dtype=dtype)
    demo_x = np.asarray(demo_x, dtype=dtype)
    if learner_x.shape != demo_x.shape:
        raise ValueError("learner and demo batches must have equal shapes")
    learner_x = learner_x[rng.permutation(learner_x.shape[0])]
    demo_x = demo_x[rng.permutation(demo_x.shape[0])]
    u = rng.uniform(size=(learner_x.shape[0], 1)).astype(dtype)
    return u * learner_x + (1.0 - u) * demo_x


def gradient_penalty_term(reward, learner_x, demo_x, rng):
    """Traced penalty mean((||grad_x r(x~)||_2 - 1)^2) over interpolates.

    ``reward`` only needs ``score_pairs_traced`` and a ``store``, so analytic
    stand-ins can be scored through the same machinery.
    """
    x_tilde = ad.leaf(interpolate_pairs(learner_x, demo_x, rng, ad.val(learner_x).dtype))
    r = reward.score_pairs_traced(x_tilde)
    g = ad.backward(ad.sum_(r), wrt=[x_tilde], create_graph=True)[x_tilde]
    norm = ad.sqrt(ad.add(ad.sum_(ad.square(g), axis=-1), GP_NORM_EPS))
    return ad.mean(ad.square(ad.sub(norm, 1.0)))


def gradient_penalty(reward, learner_pairs, demo_pairs, rng):
    """Penalty value and gradients for the reward parameters."""
    gp = gradient_penalty_term(reward, learner_pairs, demo_pairs, rng)
    grads = grads_for(gp, reward.store)
    return float(gp.data), grads


def reward_loss(reward, learner_pairs, demo_pairs, beta, rng):
    """E_learner[r] - E_demo[r] + beta * GP, with gradients for the reward.

    Args:
        learner_pairs / demo_pairs: (B, 2L) concatenated latent transitions,
            already detached from the encoder.
        beta: gradient-penalty coefficient.

    Returns:
        (loss_value, grads, parts) where parts holds the three scalar terms.
    """
    learner_pairs = np.asarray(learner_pairs, dtype=reward.dtype)
    demo_pairs = np.asarray(demo_pairs, dtype=reward.dtype)
    if demo_pairs.shape[0] == 0:
        raise ValueError("empty demonstration batch")
    r_learner = ad.mean(reward.score_pairs_traced(learner_pairs))
    r_demo = ad.mean(reward.score_pairs_traced(demo_pairs))
    gp = gradient_penalty_term(reward, learner_pairs, demo_pairs, rng)
    loss = ad.add(ad.sub(r_learner, r_demo), ad.mul(gp, beta))
    grads = grads_for(loss, reward.store)
    parts = {
        "learner_mean": float(r_learner.data),
        "demo_mean": float(r_demo.data),
        "gp": float(gp.data),
    }
    return float(loss.data), grads, parts
