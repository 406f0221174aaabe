"""Observation encoder and deterministic latent dynamics.

Both trunks end in LayerNorm, so latents are normalized vectors; predictions
and encoded targets are compared post-normalization. Task heads (reward,
value, policy) never send gradients into these parameters: the only trainer
of the encoder and dynamics is the self-supervised prediction loss below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import MlpSpec, ParamStore, grads_for, init_mlp, mlp_apply


@dataclass
class PredictedTrajectory:
    """Latent rollout of a plan: H+1 latents, H actions."""

    latents: np.ndarray   # (H+1, latent_dim)
    actions: np.ndarray   # (H, action_dim)
    rewards: np.ndarray | None = None  # optional per-step cache, (H,)


class WorldModel:
    def __init__(self, obs_dim, action_dim, latent_dim, hidden, rng, dtype=np.float32):
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.latent_dim = int(latent_dim)
        self.encoder_spec = MlpSpec(obs_dim, hidden, latent_dim, use_layernorm=True,
                                    final_bias=True, final_layernorm=True)
        self.dynamics_spec = MlpSpec(latent_dim + action_dim, hidden, latent_dim,
                                     use_layernorm=True, final_bias=True,
                                     final_layernorm=True)
        self.encoder = init_mlp(self.encoder_spec, rng, dtype=dtype)
        self.dynamics = init_mlp(self.dynamics_spec, rng, dtype=dtype)
        self.dtype = np.dtype(dtype)

    # --- forward -----------------------------------------------------------

    def encode(self, obs):
        """Encode observations, (..., obs_dim) -> (..., latent_dim). Deterministic."""
        return mlp_apply(self.encoder_spec, self.encoder, np.asarray(obs, dtype=self.dtype))

    def encode_traced(self, obs):
        return mlp_apply(self.encoder_spec, self.encoder,
                         np.asarray(obs, dtype=self.dtype), traced=True)

    def predict_next(self, z, a):
        """One latent step, (..., L) x (..., A) -> (..., L)."""
        x = ad.concat([z, np.asarray(a, dtype=self.dtype)], axis=-1)
        return mlp_apply(self.dynamics_spec, self.dynamics, x, traced=False)

    def predict_next_traced(self, z, a):
        x = ad.concat([z, a], axis=-1)
        return mlp_apply(self.dynamics_spec, self.dynamics, x, traced=True)

    def rollout(self, z0, plan):
        """Auto-regressive latent rollout of a single plan (H, A)."""
        plan = np.asarray(plan, dtype=self.dtype)
        z = np.asarray(z0, dtype=self.dtype)
        latents = [z]
        for i in range(plan.shape[0]):
            z = self.predict_next(z[None, :], plan[None, i])[0]
            latents.append(z)
        return PredictedTrajectory(latents=np.stack(latents), actions=plan)

    def rollout_batch(self, z0, plans):
        """Roll N plans at once: (N, H, A) -> (N, H+1, L)."""
        plans = np.asarray(plans, dtype=self.dtype)
        n, h = plans.shape[0], plans.shape[1]
        z = np.asarray(z0, dtype=self.dtype)
        if z.ndim == 1:
            z = np.broadcast_to(z, (n, z.shape[0]))
        out = np.empty((n, h + 1, self.latent_dim), dtype=self.dtype)
        out[:, 0] = z
        for i in range(h):
            out[:, i + 1] = self.predict_next(out[:, i], plans[:, i])
        return out


def dynamics_loss(world: WorldModel, obs_seq, actions, rho, targets=None):
    """Discounted latent self-prediction loss over H-step sequences.

    Args:
        obs_seq: (B, H+1, obs_dim) raw observations.
        actions: (B, H, action_dim) executed actions.
        rho: temporal discount.
        targets: optional precomputed (B, H, latent_dim) target latents; by
            default the experienced observations are encoded here. Either way
            no gradient flows through the target path.

    Predictions roll forward from the encoded first observation. The loss is
    averaged over the batch and normalized by latent_dim. Returns
    ``(loss_value, encoder_grads, dynamics_grads)``.
    """
    obs_seq = np.asarray(obs_seq, dtype=world.dtype)
    actions = np.asarray(actions, dtype=world.dtype)
    h = actions.shape[1]
    if obs_seq.shape[1] != h + 1:
        raise ValueError(f"need H+1 observations for H={h} actions, got {obs_seq.shape[1]}")

    if targets is None:
        # stop-gradient targets: plain numpy encodings of o_{t+1..t+H}
        targets = world.encode(obs_seq[:, 1:])

    z = world.encode_traced(obs_seq[:, 0])
    preds = []
    for i in range(h):
        z = world.predict_next_traced(z, actions[:, i])
        preds.append(z)
    err = ad.sub(ad.concat(preds, axis=0),
                 targets.transpose(1, 0, 2).reshape(h * obs_seq.shape[0], -1))
    per_step = ad.reshape(ad.sum_(ad.square(err), axis=-1), (h, obs_seq.shape[0]))
    coeffs = (rho ** np.arange(1, h + 1, dtype=np.float64)).astype(world.dtype)
    weighted = ad.sum_(ad.mul(ad.mean(per_step, axis=1), coeffs))
    loss = ad.div(weighted, float(world.latent_dim))
    enc_grads, dyn_grads = grads_for(loss, [world.encoder, world.dynamics])
    return float(loss.data), enc_grads, dyn_grads
