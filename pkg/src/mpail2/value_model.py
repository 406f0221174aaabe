"""Q ensemble with slow target copies and soft lambda-return targets.

The return estimate blends the bootstrapped Q (weight lam) with the
model-predicted reward-plus-recursion (weight 1-lam) at every step of a
policy-planned latent rollout, with a per-step entropy bonus:

    G(i) = lam * q_i + (1 - lam) * [r_i + gamma * G(i+1)] - alpha * logpi_i
    G(H) = q_H

Targets always use the slow target copies with pessimistic min-over-pair
aggregation; policy/planner return estimates use the online mean. Targets are
computed without gradients; value regression gradients touch only the online
ensemble.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nets import MlpSpec, grads_for, init_mlp, mlp_apply


class NonFiniteTargetError(RuntimeError):
    """A value target came out nan/inf; carries diagnostics."""


class ValueEnsemble:
    def __init__(self, latent_dim, action_dim, hidden, n_members, rng, dtype=np.float32):
        if n_members < 2:
            raise ValueError("value ensemble needs at least 2 members")
        self.n_members = int(n_members)
        self.spec = MlpSpec(latent_dim + action_dim, hidden, 1, use_layernorm=True,
                            final_bias=True)
        self.online = init_mlp(self.spec, rng, ensemble=self.n_members, dtype=dtype)
        self.target = self.online.copy()
        self.dtype = np.dtype(dtype)

    def q_values(self, z, a, mode="online", traced=False):
        """Per-member values: (B, L) x (B, A) -> (M, B).

        ``mode`` picks the online ensemble or its slow target copies; targets
        are never evaluated traced (they are gradient-stopped by contract).
        """
        store = self.online if mode == "online" else self.target
        if traced and mode != "online":
            raise ValueError("target ensemble is gradient-stopped; no traced path")
        x = ad.concat([z, a], axis=-1)
        b = ad.val(x).shape[0]
        xm = ad.broadcast_to(ad.reshape(x, (1, b, ad.val(x).shape[-1])),
                             (self.n_members, b, ad.val(x).shape[-1]))
        out = mlp_apply(self.spec, store, xm, traced=traced)
        return ad.reshape(out, (self.n_members, b))


def aggregate_q(per_member, purpose, rng=None):
    """Collapse per-member values (M, ...) to (...,).

    ``td_target``: min over one uniformly sampled member pair (shared across
    the batch). ``return_estimate``: mean over all members.
    """
    m = ad.val(per_member).shape[0]
    if m < 2:
        raise ValueError("aggregation needs at least 2 ensemble members")
    if purpose == "return_estimate":
        return ad.mean(per_member, axis=0)
    if purpose == "td_target":
        if isinstance(per_member, ad.Tensor):
            raise ValueError("td_target aggregation is a no-grad operation")
        if rng is None:
            raise ValueError("td_target aggregation needs an rng")
        i, j = rng.choice(m, size=2, replace=False)
        return np.minimum(per_member[i], per_member[j])
    raise ValueError(f"unknown aggregation purpose {purpose!r}")


def lambda_return(q_steps, rewards, log_probs, lam, gamma, alpha):
    """Recursive soft lambda-return along a plan.

    Args:
        q_steps: H+1 per-step value estimates (aggregated), each (B,)-like.
        rewards: H per-step predicted rewards.
        log_probs: H per-step policy log-probabilities.

    Works on Tensors (traced policy objective) and ndarrays (no-grad targets)
    alike. Returns the step-0 return.
    """
    h = len(rewards)
    if len(q_steps) != h + 1 or len(log_probs) != h:
        raise ValueError("need H+1 value steps and H rewards/log-probs")
    g = q_steps[h]
    for i in reversed(range(h)):
        g = lam * q_steps[i] + (1.0 - lam) * (rewards[i] + gamma * g) - alpha * log_probs[i]
    return g


def lambda_targets(world, reward, value, policy, z_start, rng, lam, gamma,
                   entropy_alpha=0.0, reward_baseline=0.0):
    """No-grad batched targets: plan from the policy at ``z_start``, roll the
    online dynamics, score with the current reward, bootstrap with the target
    ensemble (min over a sampled pair). Returns (targets (B,), plan log-probs).

    ``entropy_alpha`` defaults to zero: a per-level entropy bonus inside a
    bootstrapped target is amplified by ~1/((1-lam)(1-gamma)) at the fixed
    point (thousands at the default settings), which buries the
    Lipschitz-bounded reward signal under a drifting offset. The policy
    objective keeps its entropy terms; the value regression does not.

    ``reward_baseline`` (typically the demo-batch mean score) is subtracted
    from every predicted reward before the recursion. The adversarial loss
    pins only the learner/demo score gap, so the critic's absolute level
    drifts freely; bootstrapped values amplify that drift by 1/(1-gamma).
    Anchoring is a per-update constant shift, to which plan rankings and
    policy gradients are invariant.
    """
    b = z_start.shape[0]
    h = policy.horizon
    plan, lps = policy.sample_plan_batch(z_start, rng)
    lat = world.rollout_batch(z_start, plan)                      # (B, H+1, L)
    rs = reward.score(lat[:, :-1].reshape(b * h, -1),
                      lat[:, 1:].reshape(b * h, -1)).reshape(b, h)
    rs = rs - np.asarray(reward_baseline, dtype=rs.dtype)
    acts_ext = np.concatenate([plan, plan[:, -1:]], axis=1)       # terminal stand-in
    per_member = value.q_values(lat.reshape(b * (h + 1), -1),
                                acts_ext.reshape(b * (h + 1), -1), mode="target")
    qs = aggregate_q(per_member, "td_target", rng).reshape(b, h + 1)
    g = lambda_return([qs[:, i] for i in range(h + 1)],
                      [rs[:, i] for i in range(h)],
                      [lps[:, i] for i in range(h)],
                      lam, gamma, entropy_alpha)
    return g, lps


def value_loss(bundle, obs0, actions0, obs1, rng, lam, gamma, reward_baseline=0.0):
    """Ensemble MSE toward the soft lambda-return from the next state.

    q is evaluated on experienced (z, a); the target plans from the policy at
    z' and is gradient-stopped. Returns (loss, grads for the online ensemble,
    stats dict).
    """
    world, reward, value, policy = bundle.world, bundle.reward, bundle.value, bundle.policy
    z0 = world.encode(obs0)
    z1 = world.encode(obs1)
    targets, _ = lambda_targets(world, reward, value, policy, z1, rng, lam, gamma,
                                reward_baseline=reward_baseline)
    if not np.all(np.isfinite(targets)):
        bad = int(np.sum(~np.isfinite(targets)))
        raise NonFiniteTargetError(
            f"{bad}/{targets.size} non-finite value targets "
            f"(alpha={policy.alpha:.4g}, |z'|max={np.abs(z1).max():.4g})"
        )
    q_online = value.q_values(z0, np.asarray(actions0, dtype=value.dtype),
                              mode="online", traced=True)
    err = ad.sub(q_online, targets)
    loss = ad.mean(ad.square(err))
    grads = grads_for(loss, value.online)
    stats = {"target_mean": float(targets.mean()), "q_mean": float(q_online.data.mean())}
    return float(loss.data), grads, stats


def value_loss_td1(bundle, obs0, actions0, obs1, rng, lam, gamma, reward_baseline=0.0):
    """Model-free fallback: the lambda recursion with H=1 evaluated on the
    experienced transition itself (no dynamics rollout).

        G = lam * Qbar(z, a) + (1 - lam) * [r(z, z') + gamma * Qbar(z', a)]
            - alpha * logpi(a | z)
    """
    world, reward, value, policy = bundle.world, bundle.reward, bundle.value, bundle.policy
    actions0 = np.asarray(actions0, dtype=value.dtype)
    z0 = world.encode(obs0)
    z1 = world.encode(obs1)
    q0 = aggregate_q(value.q_values(z0, actions0, mode="target"), "td_target", rng)
    q1 = aggregate_q(value.q_values(z1, actions0, mode="target"), "td_target", rng)
    r = reward.score(z0, z1) - np.asarray(reward_baseline, dtype=value.dtype)
    lp = policy.log_prob_first(z0, actions0)
    # entropy excluded from bootstrapped targets, as in lambda_targets
    targets = lambda_return([q0, q1], [r], [lp], lam, gamma, 0.0)
    if not np.all(np.isfinite(targets)):
        raise NonFiniteTargetError("non-finite 1-step TD value targets")
    q_online = value.q_values(z0, actions0, mode="online", traced=True)
    loss = ad.mean(ad.square(ad.sub(q_online, targets)))
    grads = grads_for(loss, value.online)
    stats = {"target_mean": float(targets.mean()), "q_mean": float(q_online.data.mean())}
    return float(loss.data), grads, stats
