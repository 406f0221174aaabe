"""Multi-step stochastic policy emitting full plans, plus temperature tuning.

The head outputs per-step (mean, log-std) blocks of width H * 2 * action_dim;
actions are reparameterized Gaussian samples squashed by tanh, with the
standard change-of-variables correction in the log-probability. Per-step
Gaussians are independent across steps and dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .nets import MlpSpec, ParamStore, grads_for, init_mlp, mlp_apply
from .optim import adam_step
from .value_model import aggregate_q, lambda_return

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_2 = float(np.log(2.0))


@dataclass
class PolicyOutput:
    plan: np.ndarray            # (H, action_dim), squashed into (-1, 1)
    log_prob_per_step: np.ndarray  # (H,)


class PolicyModel:
    def __init__(self, latent_dim, action_dim, horizon, hidden, rng, dtype=np.float32):
        self.latent_dim = int(latent_dim)
        self.action_dim = int(action_dim)
        self.horizon = int(horizon)
        self.spec = MlpSpec(latent_dim, hidden, self.horizon * 2 * self.action_dim,
                            use_layernorm=True, final_bias=True)
        self.store = init_mlp(self.spec, rng, dtype=dtype)
        self.alpha_store = ParamStore(dtype)
        self.alpha_store.add("log_alpha", np.zeros(1))
        self.dtype = np.dtype(dtype)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.alpha_store["log_alpha"][0]))

    def plan_from_noise(self, z, eps, traced=False):
        """Plans and per-step log-probs from latent batch and unit noise.

        Args:
            z: (B, latent_dim) latents (constants; the policy never trains
                the encoder).
            eps: (B, H, A) standard-normal noise.

        Returns:
            (actions, log_probs): (B, H, A) tanh-squashed actions and (B, H)
            log-probabilities, traced Tensors when ``traced``.
        """
        b = ad.val(z).shape[0]
        out = mlp_apply(self.spec, self.store, z, traced=traced)
        out = ad.reshape(out, (b, self.horizon, 2, self.action_dim))
        mu = out[:, :, 0]
        log_std = ad.clip(out[:, :, 1], LOG_STD_MIN, LOG_STD_MAX)
        a_raw = ad.add(mu, ad.mul(ad.exp(log_std), eps))
        actions = ad.tanh(a_raw)
        # N(a_raw; mu, std) density reduces to the eps form under reparameterization
        base = ad.sub(ad.sub(ad.mul(ad.square(eps), -0.5), log_std), 0.5 * _LOG_2PI)
        # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
        corr = ad.mul(ad.sub(ad.sub(_LOG_2, a_raw), ad.softplus(ad.mul(a_raw, -2.0))), 2.0)
        log_probs = ad.sub(ad.sum_(base, axis=-1), ad.sum_(corr, axis=-1))
        return actions, log_probs

    def sample_plan_batch(self, z, rng):
        """Sample plans for a latent batch: (B, L) -> ((B, H, A), (B, H))."""
        z = np.asarray(z, dtype=self.dtype)
        eps = rng.standard_normal((z.shape[0], self.horizon, self.action_dim)).astype(self.dtype)
        return self.plan_from_noise(z, eps, traced=False)

    def sample_plan(self, z, rng) -> PolicyOutput:
        """Sample one plan at a single latent state."""
        actions, lps = self.sample_plan_batch(np.asarray(z)[None, :], rng)
        return PolicyOutput(plan=actions[0], log_prob_per_step=lps[0])

    def plan_mean(self, z):
        """Deterministic plan: tanh of the per-step means (eval acting)."""
        z = np.asarray(z, dtype=self.dtype)
        single = z.ndim == 1
        if single:
            z = z[None, :]
        out = mlp_apply(self.spec, self.store, z)
        out = out.reshape(z.shape[0], self.horizon, 2, self.action_dim)
        plan = np.tanh(out[:, :, 0])
        return plan[0] if single else plan

    def log_prob_first(self, z, actions):
        """Log-density of given first-step actions: (B, L) x (B, A) -> (B,)."""
        z = np.asarray(z, dtype=self.dtype)
        out = mlp_apply(self.spec, self.store, z)
        out = out.reshape(z.shape[0], self.horizon, 2, self.action_dim)
        mu, log_std = out[:, 0, 0], np.clip(out[:, 0, 1], LOG_STD_MIN, LOG_STD_MAX)
        a = np.clip(np.asarray(actions, dtype=self.dtype), -1.0 + 1e-6, 1.0 - 1e-6)
        a_raw = np.arctanh(a)
        zscore = (a_raw - mu) / np.exp(log_std)
        base = -0.5 * zscore**2 - log_std - 0.5 * _LOG_2PI
        corr = 2.0 * (_LOG_2 - a_raw - ad.softplus(-2.0 * a_raw))
        return np.sum(base - corr, axis=-1, dtype=np.float64).astype(self.dtype)


def policy_loss(bundle, z_batch, rng, lam, gamma):
    """Maximize the soft lambda-return of the policy's own plan.

    Gradients flow through the sampled actions into the frozen dynamics,
    reward, and online value ensemble (return_estimate aggregation); only the
    policy parameters receive an update. Returns (loss, grads, log_probs).
    """
    world, reward, value, policy = bundle.world, bundle.reward, bundle.value, bundle.policy
    z0 = np.asarray(z_batch, dtype=policy.dtype)
    b, h = z0.shape[0], policy.horizon
    eps = rng.standard_normal((b, h, policy.action_dim)).astype(policy.dtype)
    actions, log_probs = policy.plan_from_noise(z0, eps, traced=True)

    zs = [ad.constant(z0)]
    action_steps = []
    for i in range(h):
        a_i = actions[:, i]
        action_steps.append(a_i)
        zs.append(world.predict_next_traced(zs[-1], a_i))
    action_steps.append(action_steps[-1])  # terminal value stand-in action

    # one batched head call each for rewards and values over all positions
    r_flat = reward.score_traced(ad.concat(zs[:-1], axis=0), ad.concat(zs[1:], axis=0))
    r_grid = ad.reshape(r_flat, (h, b))
    z_all = ad.concat(zs, axis=0)
    a_all = ad.concat(action_steps, axis=0)
    per_member = value.q_values(z_all, a_all, mode="online", traced=True)
    q_flat = aggregate_q(per_member, "return_estimate")
    q_grid = ad.reshape(q_flat, (h + 1, b))

    g = lambda_return([q_grid[i] for i in range(h + 1)],
                      [r_grid[i] for i in range(h)],
                      [log_probs[:, i] for i in range(h)],
                      lam, gamma, policy.alpha)
    loss = ad.neg(ad.mean(g))
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite policy loss")
    grads = grads_for(loss, policy.store)
    return float(loss.data), grads, log_probs.data


def policy_loss_td1(bundle, z_batch, rng):
    """Model-free fallback: online Q mean on the first plan action minus the
    entropy bonus (the lam = 1 collapse; no rollout is available)."""
    value, policy = bundle.value, bundle.policy
    z0 = np.asarray(z_batch, dtype=policy.dtype)
    b = z0.shape[0]
    eps = rng.standard_normal((b, policy.horizon, policy.action_dim)).astype(policy.dtype)
    actions, log_probs = policy.plan_from_noise(z0, eps, traced=True)
    a0 = actions[:, 0]
    q = aggregate_q(value.q_values(ad.constant(z0), a0, mode="online", traced=True),
                    "return_estimate")
    g = ad.sub(q, ad.mul(log_probs[:, 0], policy.alpha))
    loss = ad.neg(ad.mean(g))
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite policy loss")
    grads = grads_for(loss, policy.store)
    return float(loss.data), grads, log_probs.data[:, :1]


def temperature_update(policy, log_probs, target_entropy, lr):
    """One Adam step on L(alpha) = -alpha * mean(logpi + target_entropy).

    alpha is parameterized as exp(log_alpha) so it stays positive; the
    per-action-step entropy target is -action_dim.
    """
    c = float(np.mean(np.asarray(log_probs), dtype=np.float64) + target_entropy)
    grad = np.asarray([-policy.alpha * c], dtype=policy.dtype)
    adam_step(policy.alpha_store, {"log_alpha": grad}, lr)
    return policy.alpha
