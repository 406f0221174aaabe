"""Deterministic desk-scale manipulation environments and scripted experts.

``push2d``: a point end-effector pushes a block past a goal line via rigid
projection contact. Each env step integrates the commanded motion in 10 fixed
substeps (each shorter than the contact radius, so the effector cannot tunnel
through the block); whenever the effector comes within the contact radius,
the block is projected back out along the effector-to-block direction, which
lets off-center contact make the block slide sideways.

``liftcarry1d``: grasp flag + 1-D transport + place, with a staged success
scan. The dense reward here is a validation-only oracle; the learner never
sees it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PushConfig:
    v_max: float = 0.1           # max effector motion per step (m)
    contact_radius: float = 0.05
    block_half: float = 0.025
    reset_half: float = 0.1      # block uniform in [-reset_half, reset_half]^2
    ee_start: tuple = (0.0, 0.35)
    y_goal: float = -0.3
    t_max: int = 60
    workspace: float = 0.5
    substeps: int = 10


class PushEnv:
    """2-D point push. Observation: (ee_x, ee_y, block_x, block_y)."""

    obs_dim = 4
    action_dim = 2

    def __init__(self, direction=-1, cfg: PushConfig | None = None):
        if direction not in (-1, 1):
            raise ValueError("direction must be -1 (push down) or +1 (push up)")
        self.direction = direction
        if cfg is None:
            cfg = PushConfig(y_goal=0.3 * direction)
        self.cfg = cfg
        self.name = "push2d" if direction == -1 else "push2d-transfer"
        self._ee = None
        self._block = None
        self._t = 0
        self._crossed = False

    def reset(self, rng) -> np.ndarray:
        c = self.cfg
        self._ee = np.asarray(c.ee_start, dtype=np.float32)
        self._block = rng.uniform(-c.reset_half, c.reset_half, size=2).astype(np.float32)
        self._t = 0
        self._crossed = False
        return self._obs()

    def _obs(self):
        return np.concatenate([self._ee, self._block]).astype(np.float32)

    def _beyond_goal(self, block_y):
        return self.direction * (block_y - self.cfg.y_goal) > 0

    def step(self, action):
        """Returns (obs, done, info); done at t_max or on (first) success."""
        c = self.cfg
        a = np.clip(np.asarray(action, dtype=np.float32), -1.0, 1.0)
        delta = (c.v_max / c.substeps) * a
        for _ in range(c.substeps):
            self._ee = np.clip(self._ee + delta, -c.workspace, c.workspace)
            d = self._block - self._ee
            dist = float(np.sqrt(np.sum(d * d)))
            if dist < c.contact_radius:
                if dist > 1e-8:
                    direction = d / dist
                else:
                    norm_a = float(np.sqrt(np.sum(a * a)))
                    direction = a / norm_a if norm_a > 1e-8 else np.asarray(
                        [0.0, float(self.direction)], dtype=np.float32)
                self._block = np.clip(self._ee + c.contact_radius * direction,
                                      -c.workspace, c.workspace).astype(np.float32)
        self._t += 1
        if self._beyond_goal(float(self._block[1])):
            self._crossed = True
        # fixed-length episodes: success is credited (sticky) but does not
        # terminate, so the learner also experiences post-goal states
        done = self._t >= c.t_max
        return self._obs(), done, {"success": self._crossed, "t": self._t}

    def success(self, trajectory) -> bool:
        """True iff the block crossed the goal line at any step (strict)."""
        traj = np.asarray(trajectory)
        if traj.size == 0:
            raise ValueError("empty trajectory")
        return bool(np.any(self.direction * (traj[:, 3] - self.cfg.y_goal) > 0))

    def dense_reward(self, obs) -> float:
        """Validation-only oracle: -dist(ee, block) - |block_y - y_goal|."""
        obs = np.asarray(obs, dtype=np.float64)
        d = float(np.sqrt(np.sum((obs[:2] - obs[2:]) ** 2)))
        return -d - abs(float(obs[3]) - self.cfg.y_goal)

    # demonstrators move at half speed: richer observation coverage per
    # episode (the learner sees ~2x the transition pairs per demo)
    expert_speed = 0.5

    def scripted_expert(self, obs) -> np.ndarray:
        """Stateless demonstrator: align behind the block, then push.

        For the +y (transfer) task the effector starts on the wrong side of
        the block, so the approach runs in legs: dive to a point beside and
        safely below the block, slide under it, ascend to the contact point,
        then push. Leg membership is re-derived from geometry every call.
        """
        c = self.cfg
        obs = np.asarray(obs, dtype=np.float32)
        ee, block = obs[:2], obs[2:]
        behind = np.asarray([block[0], block[1] - self.direction * c.contact_radius],
                            dtype=np.float32)
        if float(np.max(np.abs(ee - behind))) <= 0.02:
            return np.asarray([0.0, self.expert_speed * self.direction],
                              dtype=np.float32)
        if self.direction == 1:
            safe_y = float(block[1]) - c.contact_radius - 0.03
            under = abs(float(ee[0] - block[0])) <= 0.015 and ee[1] <= behind[1] + 1e-3
            if under:
                target = behind
            elif ee[1] <= safe_y + 0.011:
                target = np.asarray([block[0], safe_y], dtype=np.float32)
            elif abs(float(ee[0] - block[0])) < 0.11:
                side = 1.0 if ee[0] >= block[0] else -1.0
                target = np.asarray([block[0] + 0.14 * side, safe_y], dtype=np.float32)
            else:
                target = np.asarray([ee[0], safe_y], dtype=np.float32)
            # the roundabout +y route is long; approach legs run full speed
            gain = 1.0
        else:
            target = behind
            gain = self.expert_speed
        raw = np.clip((target - ee) / c.v_max, -1.0, 1.0)
        return (gain * raw).astype(np.float32)


@dataclass(frozen=True)
class LiftCarryConfig:
    v_max: float = 0.1
    grasp_radius: float = 0.05
    reset_half: float = 0.1
    ee_start: float = 0.35
    y_goal: float = -0.3
    t_max: int = 60
    workspace: float = 0.5


class LiftCarryEnv:
    """1-D grasp / transport / place. Observation: (ee_y, block_y, grasped)."""

    obs_dim = 3
    action_dim = 2  # (move, grip)

    def __init__(self, cfg: LiftCarryConfig | None = None):
        self.cfg = cfg or LiftCarryConfig()
        self.name = "liftcarry1d"
        self._ee = 0.0
        self._block = 0.0
        self._grasped = False
        self._t = 0
        self._stage = 0  # 0 start, 1 grasped, 2 transported, 3 placed

    def reset(self, rng) -> np.ndarray:
        c = self.cfg
        self._ee = float(np.float32(c.ee_start))
        self._block = float(rng.uniform(-c.reset_half, c.reset_half))
        self._grasped = False
        self._t = 0
        self._stage = 0
        return self._obs()

    def _obs(self):
        return np.asarray([self._ee, self._block, float(self._grasped)], dtype=np.float32)

    def step(self, action):
        c = self.cfg
        a = np.clip(np.asarray(action, dtype=np.float32), -1.0, 1.0)
        self._ee = float(np.clip(self._ee + c.v_max * float(a[0]), -c.workspace, c.workspace))
        if a[1] > 0.5 and not self._grasped and abs(self._ee - self._block) < c.grasp_radius:
            self._grasped = True
        elif a[1] < -0.5:
            self._grasped = False
        if self._grasped:
            self._block = self._ee
        self._t += 1
        beyond = self._block < c.y_goal
        if self._stage == 0 and self._grasped:
            self._stage = 1
        if self._stage == 1 and self._grasped and beyond:
            self._stage = 2
        if self._stage == 2 and not self._grasped and beyond:
            self._stage = 3
        done = self._t >= c.t_max
        return self._obs(), done, {"success": self._stage == 3, "t": self._t}

    def success(self, trajectory) -> bool:
        """Scan for grasp -> transported-beyond-goal -> placed, in order."""
        traj = np.asarray(trajectory)
        if traj.size == 0:
            raise ValueError("empty trajectory")
        stage = 0
        for row in traj:
            grasped, beyond = row[2] > 0.5, row[1] < self.cfg.y_goal
            if stage == 0 and grasped:
                stage = 1
            if stage == 1 and grasped and beyond:
                stage = 2
            if stage == 2 and not grasped and beyond:
                stage = 3
        return stage == 3

    def dense_reward(self, obs) -> float:
        obs = np.asarray(obs, dtype=np.float64)
        return -abs(float(obs[0] - obs[1])) - abs(float(obs[1]) - self.cfg.y_goal)

    def scripted_expert(self, obs) -> np.ndarray:
        c = self.cfg
        ee, block, grasped = float(obs[0]), float(obs[1]), obs[2] > 0.5
        if not grasped:
            if abs(ee - block) < c.grasp_radius * 0.8:
                return np.asarray([0.0, 1.0], dtype=np.float32)
            return np.asarray([np.clip((block - ee) / c.v_max, -1, 1), -1.0],
                              dtype=np.float32)
        if block < c.y_goal - 0.02:
            return np.asarray([0.0, -1.0], dtype=np.float32)  # place
        return np.asarray([-1.0, 1.0], dtype=np.float32)      # carry toward goal


ENV_NAMES = ("push2d", "push2d-transfer", "liftcarry1d")


def make_env(name: str):
    if name == "push2d":
        return PushEnv(direction=-1)
    if name == "push2d-transfer":
        return PushEnv(direction=1)
    if name == "liftcarry1d":
        return LiftCarryEnv()
    raise ValueError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
