"""Replay buffer of raw transitions and the observation-only demo store.

The buffer is unbounded and append-only; batches are H contiguous transitions
from a single episode, with windows sampled uniformly across all valid start
indices. Demonstrations hold observation sequences only (no actions), stored
in a plain text format:

    obs_dim,<d>
    v1,v2,...,vd        one line per observation
    ---                 episode separator
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class ChainError(ValueError):
    """Transitions do not chain (next_obs[i] != obs[i+1])."""

    def __init__(self, index):
        self.index = index
        super().__init__(f"transition chain broken at step {index}")


class DemoFormatError(ValueError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


@dataclass
class TrajectoryBatch:
    obs: np.ndarray      # (B, H+1, obs_dim)
    actions: np.ndarray  # (B, H, action_dim)


class ReplayBuffer:
    """Episode-structured, unbounded, append-only."""

    def __init__(self):
        self.episodes: list[tuple[np.ndarray, np.ndarray]] = []  # (obs (T+1,D), act (T,A))
        self.total_transitions = 0

    def __len__(self):
        return self.total_transitions

    def push_episode(self, transitions):
        """Append one episode of (obs, action, next_obs) tuples atomically.

        Empty input is a no-op; a chain break rejects the episode with the
        offending index.
        """
        transitions = list(transitions)
        if not transitions:
            return
        for i in range(len(transitions) - 1):
            if not np.array_equal(transitions[i][2], transitions[i + 1][0]):
                raise ChainError(i + 1)
        obs = np.asarray([t[0] for t in transitions] + [transitions[-1][2]], dtype=np.float32)
        act = np.asarray([t[1] for t in transitions], dtype=np.float32)
        self.episodes.append((obs, act))
        self.total_transitions += len(transitions)

    def push_arrays(self, obs_seq, actions):
        """Append an episode given (T+1, D) observations and (T, A) actions."""
        obs_seq = np.asarray(obs_seq, dtype=np.float32)
        actions = np.asarray(actions, dtype=np.float32)
        if actions.shape[0] == 0:
            return
        if obs_seq.shape[0] != actions.shape[0] + 1:
            raise ChainError(min(obs_seq.shape[0] - 1, actions.shape[0]))
        self.episodes.append((obs_seq, actions))
        self.total_transitions += actions.shape[0]

    def max_episode_len(self):
        return max((a.shape[0] for _, a in self.episodes), default=0)

    def sample_trajectory_batch(self, horizon, batch_size, rng) -> TrajectoryBatch:
        """H contiguous transitions per sample, uniform over all valid windows."""
        counts = [max(0, act.shape[0] - horizon + 1) for _, act in self.episodes]
        total = int(sum(counts))
        if total == 0:
            raise RuntimeError(
                f"no episode holds {horizon} contiguous transitions yet; "
                "collect more warmup interaction"
            )
        cum = np.cumsum(counts)
        flat = rng.integers(total, size=batch_size)
        ep_idx = np.searchsorted(cum, flat, side="right")
        start = flat - (cum[ep_idx] - np.asarray(counts)[ep_idx])
        obs = np.stack([self.episodes[e][0][s:s + horizon + 1]
                        for e, s in zip(ep_idx, start)])
        act = np.stack([self.episodes[e][1][s:s + horizon]
                        for e, s in zip(ep_idx, start)])
        return TrajectoryBatch(obs=obs, actions=act)


class DemoSet:
    """Observation-only episodes with variable lengths (each >= 2)."""

    def __init__(self, episodes):
        self.episodes = [np.asarray(ep, dtype=np.float32) for ep in episodes]
        if not self.episodes:
            raise ValueError("demo set is empty")
        for i, ep in enumerate(self.episodes):
            if ep.ndim != 2 or ep.shape[0] < 2:
                raise ValueError(f"demo episode {i} needs at least 2 observations")
        self.obs_dim = self.episodes[0].shape[1]
        if any(ep.shape[1] != self.obs_dim for ep in self.episodes):
            raise ValueError("demo episodes disagree on observation dim")

    def n_pairs(self):
        return sum(ep.shape[0] - 1 for ep in self.episodes)


def sample_demo_pairs(demos: DemoSet, batch_size, rng):
    """Uniform consecutive (o, o') pairs; never straddles episode boundaries."""
    counts = [ep.shape[0] - 1 for ep in demos.episodes]
    cum = np.cumsum(counts)
    flat = rng.integers(int(cum[-1]), size=batch_size)
    ep_idx = np.searchsorted(cum, flat, side="right")
    start = flat - (cum[ep_idx] - np.asarray(counts)[ep_idx])
    obs = np.stack([demos.episodes[e][s] for e, s in zip(ep_idx, start)])
    nxt = np.stack([demos.episodes[e][s + 1] for e, s in zip(ep_idx, start)])
    return obs, nxt


def save_demos(demos: DemoSet, path):
    lines = [f"obs_dim,{demos.obs_dim}"]
    for i, ep in enumerate(demos.episodes):
        if i:
            lines.append("---")
        for row in ep:
            lines.append(",".join(f"{v:.9g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_demos(path) -> DemoSet:
    """Parse a demo file; extra columns (action residue) are ignored with a
    warning, missing columns are an error with the line number."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DemoFormatError(path, 1, "empty demo file")
    head = lines[0].split(",")
    if len(head) != 2 or head[0].strip() != "obs_dim":
        raise DemoFormatError(path, 1, f"expected 'obs_dim,<d>' header, got {lines[0]!r}")
    try:
        obs_dim = int(head[1])
    except ValueError as exc:
        raise DemoFormatError(path, 1, f"bad obs_dim: {head[1]!r}") from exc

    episodes, current = [], []
    warned_extra = False
    for no, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line == "---":
            if current:
                episodes.append(np.asarray(current, dtype=np.float32))
                current = []
            continue
        fields = line.split(",")
        if len(fields) < obs_dim:
            raise DemoFormatError(path, no, f"expected {obs_dim} values, got {len(fields)}")
        if len(fields) > obs_dim and not warned_extra:
            log.warning("%s:%d: extra columns ignored (observations only are kept)",
                        path, no)
            warned_extra = True
        try:
            current.append([float(x) for x in fields[:obs_dim]])
        except ValueError as exc:
            raise DemoFormatError(path, no, f"bad value: {exc}") from exc
    if current:
        episodes.append(np.asarray(current, dtype=np.float32))
    if not episodes:
        raise DemoFormatError(path, len(lines), "no demo episodes found")
    return DemoSet(episodes)
