"""Bundle of the five learned components plus the temperature.

Owns construction, the planner-facing inference surface, and checkpoint
round-trips. Planning only reads parameters, so bundle methods used by the
planner are all plain-numpy and side-effect free.
"""

from __future__ import annotations

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nets import DimensionError
from .policy_model import PolicyModel
from .reward_model import RewardModel
from .value_model import ValueEnsemble, aggregate_q
from .world_model import WorldModel


class ModelBundle:
    def __init__(self, obs_dim, action_dim, latent_dim, hidden, horizon,
                 ensemble_size, seed, dtype=np.float32):
        self.obs_dim = int(obs_dim)
        self.action_dim = int(action_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.horizon = int(horizon)
        self.ensemble_size = int(ensemble_size)
        rng = np.random.default_rng(seed)
        self.world = WorldModel(obs_dim, action_dim, latent_dim, self.hidden, rng, dtype)
        self.reward = RewardModel(latent_dim, self.hidden, rng, dtype)
        self.value = ValueEnsemble(latent_dim, action_dim, self.hidden,
                                   ensemble_size, rng, dtype)
        self.policy = PolicyModel(latent_dim, action_dim, horizon, self.hidden, rng, dtype)

    # --- planner-facing inference surface (read-only) -----------------------

    def encode_np(self, obs):
        return self.world.encode(obs)

    def rollout_batch(self, z0, plans):
        return self.world.rollout_batch(z0, plans)

    def reward_pairs_np(self, z, z_next):
        return self.reward.score(z, z_next)

    def q_mean_np(self, z, a):
        return aggregate_q(self.value.q_values(z, a, mode="online"), "return_estimate")

    def sample_plans_np(self, z0, n, rng):
        z = np.broadcast_to(np.asarray(z0, dtype=self.policy.dtype),
                            (n, self.latent_dim))
        actions, _ = self.policy.sample_plan_batch(z, rng)
        return actions

    # --- persistence ---------------------------------------------------------

    def component_stores(self):
        return {
            "encoder": self.world.encoder,
            "dynamics": self.world.dynamics,
            "reward": self.reward.store,
            "q": self.value.online,
            "q_target": self.value.target,
            "policy": self.policy.store,
            "alpha": self.policy.alpha_store,
        }

    def dims_meta(self):
        return {
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "latent_dim": self.latent_dim,
            "hidden": list(self.hidden),
            "horizon": self.horizon,
            "ensemble_size": self.ensemble_size,
        }

    def save(self, path, extra_meta=None):
        meta = {"dims": self.dims_meta()}
        meta.update(extra_meta or {})
        save_checkpoint(path, self.component_stores(), meta)

    def load_components(self, path, components=None):
        """Overwrite (a subset of) components from a checkpoint, bit-exact.

        ``components`` defaults to everything present. Dim mismatches raise
        with the offending tensor names.
        """
        stores, meta = load_checkpoint(path)
        own = self.component_stores()
        if components is None:
            components = list(own)
        bad = []
        for comp in components:
            if comp not in stores:
                raise CheckpointError(f"checkpoint misses component {comp!r}")
            src, dst = stores[comp], own[comp]
            if src.names() != dst.names():
                raise DimensionError(
                    f"component {comp!r} tensor names differ: "
                    f"{sorted(set(src.names()) ^ set(dst.names()))}"
                )
            for name in src.names():
                if src[name].shape != dst[name].shape:
                    bad.append(f"{comp}/{name}: {src[name].shape} != {dst[name].shape}")
        if bad:
            raise DimensionError("checkpoint/model shape mismatch: " + "; ".join(bad))
        for comp in components:
            src, dst = stores[comp], own[comp]
            for name in src.names():
                dst.set_(name, src[name])
                np.copyto(dst.m[name], src.m[name])
                np.copyto(dst.v[name], src.v[name])
                dst.step[name] = src.step[name]
        return meta

    @classmethod
    def from_checkpoint(cls, path, seed=0):
        _, meta = load_checkpoint(path)
        dims = meta["dims"]
        bundle = cls(dims["obs_dim"], dims["action_dim"], dims["latent_dim"],
                     dims["hidden"], dims["horizon"], dims["ensemble_size"], seed=seed)
        bundle.load_components(path)
        return bundle, meta
