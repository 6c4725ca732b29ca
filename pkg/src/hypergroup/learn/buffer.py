"""Episode storage for off-policy training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    obs: np.ndarray          # (n, obs_dim)
    state: np.ndarray        # (state_dim,)
    actions: np.ndarray      # (n,)
    hidden: np.ndarray       # (n, hidden) before acting
    reward: float
    next_obs: np.ndarray
    next_state: np.ndarray
    done: bool
    grouping_version: int


@dataclass
class Episode:
    """A finished episode packed as arrays; ``obs``/``state`` carry T+1 rows."""
    obs: np.ndarray
    state: np.ndarray
    actions: np.ndarray
    hidden: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    labels: np.ndarray
    cohesion: np.ndarray
    grouping_version: int

    @property
    def length(self) -> int:
        return len(self.reward)

    @classmethod
    def from_transitions(cls, steps: list[Transition], labels, cohesion) -> "Episode":
        if not steps:
            raise ValueError("an episode needs at least one transition")
        return cls(
            obs=np.stack([t.obs for t in steps] + [steps[-1].next_obs]),
            state=np.stack([t.state for t in steps] + [steps[-1].next_state]),
            actions=np.stack([t.actions for t in steps]).astype(int),
            hidden=np.stack([t.hidden for t in steps]),
            reward=np.array([t.reward for t in steps]),
            done=np.array([t.done for t in steps], dtype=bool),
            labels=np.asarray(labels, dtype=int).copy(),
            cohesion=np.asarray(cohesion, dtype=np.float64).copy(),
            grouping_version=steps[0].grouping_version,
        )


@dataclass
class EpisodeBatch:
    """Episodes padded to a common length; time-major arrays."""
    obs: np.ndarray        # (T+1, B, n, d)
    state: np.ndarray      # (T+1, B, sd)
    actions: np.ndarray    # (T, B, n)
    reward: np.ndarray     # (T, B)
    done: np.ndarray       # (T, B)
    mask: np.ndarray       # (T, B) 1 for real steps
    episodes: list[Episode]

    @property
    def size(self) -> int:
        return self.reward.shape[1]

    @property
    def max_len(self) -> int:
        return self.reward.shape[0]


def pad_episodes(episodes: list[Episode]) -> EpisodeBatch:
    t_max = max(e.length for e in episodes)
    b = len(episodes)
    n, d = episodes[0].obs.shape[1:]
    sd = episodes[0].state.shape[1]
    obs = np.zeros((t_max + 1, b, n, d))
    state = np.zeros((t_max + 1, b, sd))
    actions = np.zeros((t_max, b, n), dtype=int)
    reward = np.zeros((t_max, b))
    done = np.ones((t_max, b))
    mask = np.zeros((t_max, b))
    for j, e in enumerate(episodes):
        t = e.length
        obs[: t + 1, j] = e.obs
        obs[t + 1:, j] = e.obs[-1]
        state[: t + 1, j] = e.state
        state[t + 1:, j] = e.state[-1]
        actions[:t, j] = e.actions
        actions[t:, j] = 4
        reward[:t, j] = e.reward
        done[:t, j] = e.done
        mask[:t, j] = 1.0
    return EpisodeBatch(obs, state, actions, reward, done, mask, episodes)


class ReplayBuffer:
    """Ring buffer of whole episodes."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.storage: list[Episode] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self.storage)

    def add(self, episode: Episode) -> None:
        if len(self.storage) < self.capacity:
            self.storage.append(episode)
        else:
            self.storage[self._next] = episode
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch: int, rng: np.random.Generator) -> EpisodeBatch:
        if not self.storage:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(len(self.storage), size=min(batch, len(self.storage)), replace=False)
        return pad_episodes([self.storage[i] for i in np.sort(idx)])
