"""MPPI plan optimization over the learned latent models.

Each call runs J iterations of: sample N - M plans from a diagonal Gaussian
(warm-started from the previous plan, std reset to the max), sample M fresh
plans from the policy, score every plan by its discounted model return with a
terminal value bootstrap, and refit the Gaussian to the softmax-weighted
top-K elites. Scoring is read-only on the models and is evaluated in fixed
128-plan chunks so results are bitwise identical no matter how many worker
threads execute the chunks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PlannerConfig:
    num_samples: int = 512
    num_elites: int = 64
    iterations: int = 5
    policy_fraction: float = 0.05
    horizon: int = 7
    temperature: float = 2.0
    std_min: float = 0.05
    std_max: float = 2.0
    gamma: float = 0.99
    # fixed scoring-chunk size: config-level, never thread-derived, so results
    # are bitwise independent of worker count
    score_chunk: int = 256

    def __post_init__(self):
        if not 1 <= self.num_elites <= self.num_samples:
            raise ValueError("need 1 <= num_elites <= num_samples")
        if not 0.0 <= self.policy_fraction <= 1.0:
            raise ValueError("policy_fraction must be in [0, 1]")
        if not self.std_min < self.std_max:
            raise ValueError("std_min must be below std_max")
        if self.iterations < 1 or self.horizon < 1:
            raise ValueError("iterations and horizon must be >= 1")
        if self.score_chunk < 1:
            raise ValueError("score_chunk must be >= 1")

    @property
    def n_policy(self):
        return int(round(self.policy_fraction * self.num_samples))


@dataclass
class PlanDistribution:
    mean: np.ndarray  # (H, A)
    std: np.ndarray   # (H, A), diagonal


@dataclass
class PlanResult:
    plan: np.ndarray
    dist: PlanDistribution
    policy_calls: int = 0
    discarded: int = 0
    degenerate: bool = False      # an iteration produced no finite return
    trace: list = field(default_factory=list)  # (iteration, index, return, elite)


def warm_start(prev_plan, cfg: PlannerConfig, action_dim) -> PlanDistribution:
    """Shift the previous plan back one step; zero mean at episode start.

    The sampling std resets to std_max for the first iteration of every call.
    """
    mean = np.zeros((cfg.horizon, action_dim), dtype=np.float32)
    if prev_plan is not None:
        prev_plan = np.asarray(prev_plan, dtype=np.float32)
        if prev_plan.shape != (cfg.horizon, action_dim):
            raise ValueError(f"previous plan shape {prev_plan.shape} != "
                             f"{(cfg.horizon, action_dim)}")
        mean[:-1] = prev_plan[1:]
    std = np.full((cfg.horizon, action_dim), cfg.std_max, dtype=np.float32)
    return PlanDistribution(mean=mean, std=std)


def _score_chunk(models, z0, plans, cfg, out, start):
    lat = models.rollout_batch(z0, plans)                         # (C, H+1, L)
    c, h = plans.shape[0], plans.shape[1]
    rew = models.reward_pairs_np(lat[:, :-1].reshape(c * h, -1),
                                 lat[:, 1:].reshape(c * h, -1)).reshape(c, h)
    disc = (cfg.gamma ** np.arange(h)).astype(np.float32)
    terminal = models.q_mean_np(lat[:, h], plans[:, h - 1])
    ret = np.sum(rew * disc, axis=1, dtype=np.float64).astype(np.float32)
    ret += (cfg.gamma ** h) * terminal
    out[start:start + c] = ret


def score_plans(z0, plans, models, cfg: PlannerConfig, pool=None):
    """Discounted model return of each plan; non-finite scores become -inf.

    Returns (returns (N,), n_discarded). Chunk boundaries are fixed so the
    result does not depend on the executor.
    """
    plans = np.asarray(plans, dtype=np.float32)
    n = plans.shape[0]
    returns = np.empty(n, dtype=np.float32)
    chunk = cfg.score_chunk
    spans = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if pool is None:
        for s, e in spans:
            _score_chunk(models, z0, plans[s:e], cfg, returns, s)
    else:
        futures = [pool.submit(_score_chunk, models, z0, plans[s:e], cfg, returns, s)
                   for s, e in spans]
        for f in futures:
            f.result()
    bad = ~np.isfinite(returns)
    discarded = int(bad.sum())
    if discarded:
        log.warning("discarding %d non-finite plan returns", discarded)
        returns[bad] = -np.inf
    return returns, discarded


def elite_update(returns, plans, dist, cfg: PlannerConfig, rng=None):
    """Refit the sampling Gaussian to the softmax-weighted top-K plans.

    Non-elite plans are excluded from the weights entirely; the best return is
    subtracted before exponentiation, making the weights invariant to shifting
    all returns by a constant. The refit std is clipped to the configured
    range.
    """
    returns = np.asarray(returns)
    if returns.shape[0] != np.asarray(plans).shape[0]:
        raise ValueError("returns and plans must align")
    if returns.shape[0] < cfg.num_elites:
        raise ValueError("need at least num_elites plans")
    order = np.argsort(-returns, kind="stable")[:cfg.num_elites]
    elite_r = returns[order].astype(np.float64)
    elite_p = np.asarray(plans)[order].astype(np.float64)
    best = elite_r[0]
    w = np.exp((elite_r - best) / cfg.temperature)
    w /= w.sum()
    mean = np.sum(w[:, None, None] * elite_p, axis=0)
    var = np.sum(w[:, None, None] * (elite_p - mean) ** 2, axis=0)
    std = np.clip(np.sqrt(var), cfg.std_min, cfg.std_max)
    return PlanDistribution(mean=mean.astype(np.float32), std=std.astype(np.float32))


def plan(obs, prev_plan, models, cfg: PlannerConfig, rng,
         mode="sample", pool=None, want_trace=False) -> PlanResult:
    """Full planning call: warm start, J rounds of sample/score/refit, then
    draw the executed plan from the converged distribution (``mode="mean"``
    returns the mean itself, used for low-variance evaluation)."""
    z0 = models.encode_np(np.asarray(obs, dtype=np.float32))
    action_dim = models.action_dim
    dist = warm_start(prev_plan, cfg, action_dim)
    n, m = cfg.num_samples, cfg.n_policy
    result = PlanResult(plan=None, dist=dist)

    for j in range(cfg.iterations):
        eps = rng.standard_normal((n - m, cfg.horizon, action_dim)).astype(np.float32)
        gauss = np.clip(dist.mean + dist.std * eps, -1.0, 1.0)
        if m > 0:
            pol = models.sample_plans_np(z0, m, rng)
            result.policy_calls += 1
            plans = np.concatenate([gauss, pol], axis=0)
        else:
            plans = gauss
        returns, discarded = score_plans(z0, plans, models, cfg, pool=pool)
        result.discarded += discarded
        if not np.any(np.isfinite(returns)):
            result.degenerate = True  # keep the previous distribution
            continue
        new_dist = elite_update(returns, plans, dist, cfg, rng)
        if want_trace:
            cutoff = np.sort(returns)[-cfg.num_elites]
            for k in range(n):
                result.trace.append((j, k, float(returns[k]), bool(returns[k] >= cutoff)))
        dist = new_dist

    if mode == "mean":
        final = dist.mean.copy()
    else:
        eps = rng.standard_normal((cfg.horizon, action_dim)).astype(np.float32)
        final = np.clip(dist.mean + dist.std * eps, -1.0, 1.0)
    result.plan = final.astype(np.float32)
    result.dist = dist
    return result
