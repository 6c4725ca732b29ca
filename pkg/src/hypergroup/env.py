"""Predator-prey pursuit on a square grid with local vision.

Each step every not-yet-captured predator costs the team 0.05.  A predator
that reaches the prey's cell is captured for the rest of the episode and stops
moving; the episode ends when all predators are captured or at ``max_steps``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ACTIONS = ("up", "down", "left", "right", "stay")
MOVES = np.array([[-1, 0], [1, 0], [0, -1], [0, 1], [0, 0]])
N_ACTIONS = len(ACTIONS)
STEP_PENALTY = -0.05
OUT_OF_BOUNDS = -1.0
PREY_POLICIES = ("stationary", "random")


@dataclass
class PPConfig:
    grid: int = 10
    n_predators: int = 5
    vision: int = 1
    max_steps: int = 40
    prey_policy: str = "stationary"
    seed: int = 0

    def validate(self) -> None:
        if self.grid < 3:
            raise ValueError("env.grid must be >= 3")
        if self.n_predators < 1:
            raise ValueError("env.n_predators must be >= 1")
        if self.vision < 0:
            raise ValueError("env.vision must be >= 0")
        if self.max_steps < 1:
            raise ValueError("env.max_steps must be >= 1")
        if self.prey_policy not in PREY_POLICIES:
            raise ValueError(f"env.prey_policy must be one of {PREY_POLICIES}")
        if self.n_predators + 1 > self.grid * self.grid:
            raise ValueError("env.grid too small for the number of predators")

    @property
    def obs_dim(self) -> int:
        return (2 * self.vision + 1) ** 2 * 3 + 2

    @property
    def state_dim(self) -> int:
        return 2 * (self.n_predators + 1) + 1


@dataclass
class PPState:
    predators: np.ndarray
    prey: np.ndarray
    step: int
    captured: np.ndarray

    @property
    def done_all_captured(self) -> bool:
        return bool(self.captured.all())


def reset(cfg: PPConfig, rng: np.random.Generator) -> tuple[PPState, np.ndarray]:
    cells = rng.choice(cfg.grid * cfg.grid, size=cfg.n_predators + 1, replace=False)
    pos = np.stack([cells // cfg.grid, cells % cfg.grid], axis=1)
    state = PPState(pos[:-1].copy(), pos[-1].copy(), 0, np.zeros(cfg.n_predators, dtype=bool))
    return state, observe(state, cfg)


def observe(state: PPState, cfg: PPConfig) -> np.ndarray:
    """Per-predator observation, shape (n, obs_dim).

    Layout: channel-major (2v+1)^2 patches for [self, other predators, prey],
    then own (row, col) scaled to [0, 1].  Off-grid cells read -1 in every
    channel.
    """
    v, g = cfg.vision, cfg.grid
    size = g + 2 * v
    preds = np.full((size, size), OUT_OF_BOUNDS)
    preds[v:v + g, v:v + g] = 0.0
    np.add.at(preds, (state.predators[:, 0] + v, state.predators[:, 1] + v), 1.0)
    prey = np.full((size, size), OUT_OF_BOUNDS)
    prey[v:v + g, v:v + g] = 0.0
    prey[state.prey[0] + v, state.prey[1] + v] = 1.0
    inside = np.full((size, size), OUT_OF_BOUNDS)
    inside[v:v + g, v:v + g] = 0.0

    w = 2 * v + 1
    out = np.empty((cfg.n_predators, cfg.obs_dim))
    for i, (r, c) in enumerate(state.predators):
        me = inside[r:r + w, c:c + w].copy()
        me[v, v] = 1.0
        others = preds[r:r + w, c:c + w].copy()
        others[v, v] -= 1.0
        out[i, : w * w] = me.ravel()
        out[i, w * w: 2 * w * w] = others.ravel()
        out[i, 2 * w * w: 3 * w * w] = prey[r:r + w, c:c + w].ravel()
    out[:, -2:] = state.predators / (g - 1)
    return out


def step(state: PPState, actions, cfg: PPConfig, rng: np.random.Generator | None = None):
    """Advance one step; returns ``(next_state, observations, team_reward, done)``."""
    actions = np.asarray(actions, dtype=int)
    if actions.shape != (cfg.n_predators,):
        raise ValueError(f"expected {cfg.n_predators} actions, got shape {actions.shape}")
    if np.any((actions < 0) | (actions >= N_ACTIONS)):
        raise ValueError(f"actions must lie in [0, {N_ACTIONS})")
    moved = state.predators + MOVES[actions]
    off = np.any((moved < 0) | (moved >= cfg.grid), axis=1) | state.captured
    predators = np.where(off[:, None], state.predators, moved)
    prey = state.prey
    if cfg.prey_policy == "random":
        if rng is None:
            raise ValueError("a random prey needs an rng")
        target = prey + MOVES[rng.integers(N_ACTIONS)]
        if np.all((target >= 0) & (target < cfg.grid)):
            prey = target
    captured = state.captured | np.all(predators == prey, axis=1)
    nxt = PPState(predators, prey.copy(), state.step + 1, captured)
    reward = STEP_PENALTY * float(np.sum(~captured))
    done = bool(captured.all() or nxt.step >= cfg.max_steps)
    return nxt, observe(nxt, cfg), reward, done


def global_state(state: PPState, cfg: PPConfig) -> np.ndarray:
    """[predator rows/cols..., prey row/col] scaled to [0, 1], then step fraction."""
    pos = np.concatenate([state.predators.reshape(-1), state.prey]) / (cfg.grid - 1)
    return np.concatenate([pos, [state.step / cfg.max_steps]])


class PredatorPrey:
    """Stateful wrapper bundling a config, an RNG and the current state."""

    def __init__(self, cfg: PPConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.state: PPState | None = None
        self.done = True

    def reset(self) -> np.ndarray:
        self.state, obs = reset(self.cfg, self.rng)
        self.done = False
        return obs

    def step(self, actions):
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        self.state, obs, reward, self.done = step(self.state, actions, self.cfg, self.rng)
        return obs, reward, self.done

    def global_state(self) -> np.ndarray:
        return global_state(self.state, self.cfg)

    def success(self) -> bool:
        return self.state.done_all_captured


def random_baseline(cfg: PPConfig, episodes: int, rng: np.random.Generator | int | None = None) -> float:
    """Mean episode length under uniformly random actions."""
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    env = PredatorPrey(replace(cfg), rng)
    total = 0
    for _ in range(episodes):
        env.reset()
        while not env.done:
            env.step(rng.integers(N_ACTIONS, size=cfg.n_predators))
        total += env.state.step
    return total / episodes
