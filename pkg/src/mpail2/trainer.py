"""Training loop, evaluation, demo generation, and transfer initialization.

One episode of interaction (acting through the planner, or the policy's first
action under the no-planning ablations) is followed by ``steps * UTD`` update
rounds. Every round samples one trajectory batch and one demo batch and runs
the component updates in fixed order: dynamics, reward, value (+ polyak
target update), policy (+ temperature).

Metrics land in ``<out>/metrics.csv`` (deterministic columns only, so a fixed
seed reproduces the file byte-for-byte); per-episode wall-clock times go to
``<out>/timing.csv``. Checkpoints are directories under ``<out>/checkpoints``.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig
from .envs import make_env
from .experience import DemoSet, ReplayBuffer, load_demos, sample_demo_pairs, save_demos
from .models import ModelBundle
from .optim import NonFiniteGradientError, adam_step, clip_grad_norm, polyak_update
from .planner import PlannerConfig, plan
from .policy_model import policy_loss, policy_loss_td1, temperature_update
from .reward_model import reward_loss
from .value_model import NonFiniteTargetError, value_loss, value_loss_td1
from .world_model import dynamics_loss

log = logging.getLogger(__name__)

METRICS_HEADER = ("episode,steps,success,cum_success,mean_reward,"
                  "dyn_loss,reward_loss,value_loss,policy_loss,alpha")

TRANSFER_MODES = ("full", "dynamics-only")
_DYNAMICS_COMPONENTS = ("encoder", "dynamics")


class TrainingHalted(RuntimeError):
    """Non-finite loss or gradient; a 'halted' checkpoint was written."""

    def __init__(self, msg, checkpoint_dir):
        super().__init__(msg)
        self.checkpoint_dir = checkpoint_dir


@dataclass
class TrainResult:
    out_dir: str
    checkpoint_dir: str
    metrics_path: str
    episodes_run: int
    successes: int
    first_success_episode: int | None
    plan_calls: int
    dyn_updates: int


def planner_threads() -> int:
    try:
        return max(1, int(os.environ.get("MPAIL2_THREADS", "1")))
    except ValueError:
        return 1


def _fmt(x) -> str:
    return f"{float(x):.9g}"


def _episode_mean_reward(bundle, obs_seq) -> float:
    z = bundle.world.encode(obs_seq[:-1])
    z2 = bundle.world.encode(obs_seq[1:])
    return float(np.mean(bundle.reward.score(z, z2), dtype=np.float64))


def _build_bundle(cfg: TrainConfig, env) -> ModelBundle:
    return ModelBundle(env.obs_dim, env.action_dim, cfg.latent_dim, cfg.hidden,
                       cfg.horizon, cfg.ensemble_size, seed=cfg.seed)


def _act(bundle, cfg, pcfg, obs, prev_plan, rng, pool):
    """One action per the configured ablation; returns (action, prev_plan, planned)."""
    if cfg.no_planning:
        z = bundle.world.encode(obs[None, :])[0]
        out = bundle.policy.sample_plan(z, rng)
        return out.plan[0], None, False
    res = plan(obs, prev_plan, bundle, pcfg, rng, mode="sample", pool=pool)
    return res.plan[0], res.plan, True


def _update_round(bundle, cfg: TrainConfig, buffer, demos, rng, acc):
    batch = buffer.sample_trajectory_batch(cfg.horizon, cfg.batch_size, rng)
    demo_obs, demo_next = sample_demo_pairs(demos, cfg.batch_size, rng)
    world, reward, value, policy = bundle.world, bundle.reward, bundle.value, bundle.policy
    # window starts cover 0..T-H; a shared random offset reaches every
    # transition, including the last steps of each episode
    k = int(rng.integers(cfg.horizon))

    if not cfg.no_model:
        dl, enc_g, dyn_g = dynamics_loss(world, batch.obs, batch.actions, cfg.rho)
        adam_step(world.encoder, enc_g, cfg.encoder_lr)
        adam_step(world.dynamics, dyn_g, cfg.lr)
        acc["dyn_loss"].append(dl)
        acc["dyn_updates"] += 1

    z_l = world.encode(batch.obs[:, k])
    z_l2 = world.encode(batch.obs[:, k + 1])
    learner_pairs = np.concatenate([z_l, z_l2], axis=-1)
    demo_pairs = np.concatenate([world.encode(demo_obs), world.encode(demo_next)], axis=-1)
    rl, r_grads, parts = reward_loss(reward, learner_pairs, demo_pairs, cfg.gp_coef, rng)
    adam_step(reward.store, r_grads, cfg.lr)
    acc["reward_loss"].append(rl)
    # the adversarial loss pins only the learner/demo gap; the demo mean
    # anchors value targets against free offset drift
    baseline = reward.score(world.encode(demo_obs), world.encode(demo_next)).mean()

    if cfg.no_model:
        vl, v_grads, _ = value_loss_td1(bundle, batch.obs[:, k], batch.actions[:, k],
                                        batch.obs[:, k + 1], rng,
                                        cfg.lambda_return, cfg.gamma,
                                        reward_baseline=baseline)
    else:
        vl, v_grads, _ = value_loss(bundle, batch.obs[:, k], batch.actions[:, k],
                                    batch.obs[:, k + 1], rng,
                                    cfg.lambda_return, cfg.gamma,
                                    reward_baseline=baseline)
    clip_grad_norm(v_grads, cfg.value_grad_clip)
    adam_step(value.online, v_grads, cfg.lr)
    polyak_update(value.target, value.online, cfg.polyak)
    acc["value_loss"].append(vl)

    z_b = world.encode(batch.obs[:, k])
    if cfg.no_model:
        pl, p_grads, lps = policy_loss_td1(bundle, z_b, rng)
    else:
        pl, p_grads, lps = policy_loss(bundle, z_b, rng, cfg.lambda_return, cfg.gamma)
    clip_grad_norm(p_grads, cfg.policy_grad_clip)
    adam_step(policy.store, p_grads, cfg.lr)
    temperature_update(policy, lps, -float(bundle.action_dim), cfg.alpha_lr)
    acc["policy_loss"].append(pl)


def train(cfg: TrainConfig, init_checkpoint=None, transfer_mode=None) -> TrainResult:
    """Run the full training loop; see the module docstring.

    ``init_checkpoint`` (with ``transfer_mode``) seeds weights from a previous
    run: "full" loads every component, "dynamics-only" loads only the encoder
    and dynamics. The replay buffer always starts empty.
    """
    if cfg.demos is None:
        raise ConfigError("training needs --demos (observation-only demo file)")
    if transfer_mode is not None and transfer_mode not in TRANSFER_MODES:
        raise ConfigError(f"transfer mode must be one of {TRANSFER_MODES}")
    env = make_env(cfg.env)
    demos = load_demos(cfg.demos)
    if demos.obs_dim != env.obs_dim:
        raise ConfigError(
            f"demo obs dim {demos.obs_dim} != env {cfg.env} obs dim {env.obs_dim}"
        )
    bundle = _build_bundle(cfg, env)
    if init_checkpoint is not None:
        components = None if transfer_mode in (None, "full") else list(_DYNAMICS_COMPONENTS)
        bundle.load_components(init_checkpoint, components)

    pcfg = cfg.planner_config()
    rng = np.random.default_rng(cfg.seed)
    buffer = ReplayBuffer()
    threads = planner_threads()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    out_dir = Path(cfg.out)
    ckpt_root = out_dir / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv"
    timing_path = out_dir / "timing.csv"

    meta = {"env": cfg.env, "ablation": cfg.ablation, "seed": cfg.seed,
            "planner": dict(cfg.planner), "gamma": cfg.gamma}
    result = TrainResult(out_dir=str(out_dir), checkpoint_dir="",
                         metrics_path=str(metrics_path), episodes_run=0, successes=0,
                         first_success_episode=None, plan_calls=0, dyn_updates=0)

    def save(tag):
        path = ckpt_root / tag
        bundle.save(path, extra_meta=meta)
        return str(path)

    recent = []
    try:
        with metrics_path.open("w") as mf, timing_path.open("w") as tf:
            mf.write(METRICS_HEADER + "\n")
            tf.write("episode,wall_time_s\n")
            if cfg.episodes == 0:
                result.checkpoint_dir = save("final")
                return result
            for ep in range(1, cfg.episodes + 1):
                t0 = time.perf_counter()
                obs = env.reset(rng)
                obs_list, act_list = [obs], []
                prev_plan, done, info = None, False, {"success": False}
                while not done:
                    action, prev_plan, planned = _act(bundle, cfg, pcfg, obs,
                                                      prev_plan, rng, pool)
                    result.plan_calls += int(planned)
                    obs, done, info = env.step(action)
                    obs_list.append(obs)
                    act_list.append(action)
                obs_seq = np.stack(obs_list)
                buffer.push_arrays(obs_seq, np.stack(act_list))
                steps = len(act_list)
                success = bool(info["success"])
                result.successes += int(success)
                if success and result.first_success_episode is None:
                    result.first_success_episode = ep

                acc = {"dyn_loss": [], "reward_loss": [], "value_loss": [],
                       "policy_loss": [], "dyn_updates": result.dyn_updates}
                if buffer.max_episode_len() >= cfg.horizon:
                    for _ in range(int(round(steps * cfg.utd))):
                        _update_round(bundle, cfg, buffer, demos, rng, acc)
                result.dyn_updates = acc["dyn_updates"]

                def avg(key):
                    vals = acc[key]
                    return float(np.mean(vals)) if vals else float("nan")

                row = ",".join([
                    str(ep), str(steps), str(int(success)), str(result.successes),
                    _fmt(_episode_mean_reward(bundle, obs_seq)),
                    _fmt(avg("dyn_loss")), _fmt(avg("reward_loss")),
                    _fmt(avg("value_loss")), _fmt(avg("policy_loss")),
                    _fmt(bundle.policy.alpha),
                ])
                mf.write(row + "\n")
                mf.flush()
                tf.write(f"{ep},{time.perf_counter() - t0:.3f}\n")
                tf.flush()
                result.episodes_run = ep

                if cfg.checkpoint_every > 0 and ep % cfg.checkpoint_every == 0:
                    save(f"ep_{ep:05d}")

                recent.append(int(success))
                if cfg.early_stop_on_first_success and success:
                    log.info("stopping at first success (episode %d)", ep)
                    break
                if (cfg.early_stop_window > 0 and len(recent) >= cfg.early_stop_window
                        and np.mean(recent[-cfg.early_stop_window:]) >= cfg.early_stop_rate):
                    log.info("trailing success criterion met at episode %d", ep)
                    break
    except (NonFiniteTargetError, NonFiniteGradientError, FloatingPointError) as exc:
        halted = save("halted")
        raise TrainingHalted(f"{type(exc).__name__}: {exc}", halted) from exc
    finally:
        if pool is not None:
            pool.shutdown()

    result.checkpoint_dir = save("final")
    return result


def transfer(init_checkpoint, new_demo_path, cfg: TrainConfig, mode="full") -> TrainResult:
    """Initialize from a previous task's checkpoint and train on new demos."""
    cfg = replace(cfg, demos=str(new_demo_path))
    return train(cfg, init_checkpoint=init_checkpoint, transfer_mode=mode)


def evaluate(checkpoint, env_name, n_episodes, seed, out_csv=None):
    """Deterministic planner evaluation of a checkpoint.

    Acts with the final MPPI distribution mean (or the policy's deterministic
    first action under the no-planning ablations). Returns
    (success_percentage, per-episode records).
    """
    if n_episodes <= 0:
        raise ConfigError("evaluation needs n_episodes > 0")
    bundle, meta = ModelBundle.from_checkpoint(checkpoint)
    env = make_env(env_name)
    if env.obs_dim != bundle.obs_dim or env.action_dim != bundle.action_dim:
        raise ConfigError(
            f"checkpoint dims (obs {bundle.obs_dim}, act {bundle.action_dim}) do not "
            f"match env {env_name} (obs {env.obs_dim}, act {env.action_dim})"
        )
    ablation = meta.get("ablation", "full")
    pcfg = PlannerConfig(horizon=bundle.horizon, gamma=meta.get("gamma", 0.99),
                         **meta.get("planner", {}))
    rng = np.random.default_rng(seed)
    threads = planner_threads()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    records = []
    try:
        for ep in range(1, n_episodes + 1):
            obs = env.reset(rng)
            prev_plan, done, info = None, False, {"success": False}
            steps = 0
            # success is sticky, so stopping at the first crossing cannot
            # change the outcome; it only saves planner calls
            while not done and not info["success"]:
                if ablation == "full":
                    res = plan(obs, prev_plan, bundle, pcfg, rng, mode="mean", pool=pool)
                    action, prev_plan = res.plan[0], res.plan
                else:
                    z = bundle.world.encode(obs[None, :])[0]
                    action = bundle.policy.plan_mean(z)[0]
                obs, done, info = env.step(action)
                steps += 1
            records.append((ep, steps, bool(info["success"])))
    finally:
        if pool is not None:
            pool.shutdown()
    pct = 100.0 * sum(r[2] for r in records) / n_episodes
    if out_csv is not None:
        lines = ["episode,steps,success"] + [f"{e},{s},{int(ok)}" for e, s, ok in records]
        Path(out_csv).write_text("\n".join(lines) + "\n")
    return pct, records


def gen_demos(env_name, n_episodes, out_path, seed):
    """Collect observation-only demos from the scripted expert.

    Only success-verified episodes are kept; raises after 10x oversampling if
    the expert cannot produce enough successes.
    """
    if n_episodes <= 0:
        raise ConfigError("gen-demos needs n_episodes > 0")
    env = make_env(env_name)
    if not hasattr(env, "scripted_expert"):
        raise ConfigError(f"env {env_name} has no scripted expert")
    rng = np.random.default_rng(seed)
    episodes = []
    attempts = 0
    while len(episodes) < n_episodes:
        if attempts >= 10 * n_episodes:
            raise RuntimeError(
                f"scripted expert produced only {len(episodes)}/{n_episodes} "
                f"successes in {attempts} attempts"
            )
        attempts += 1
        obs = env.reset(rng)
        traj = [obs]
        done, info = False, {"success": False}
        while not done and not info["success"]:
            obs, done, info = env.step(env.scripted_expert(obs))
            traj.append(obs)
        # the demonstrator stops at task completion: variable-length episodes
        if info["success"]:
            episodes.append(np.stack(traj))
    demos = DemoSet(episodes)
    save_demos(demos, out_path)
    return demos
