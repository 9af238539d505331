#!/usr/bin/env python3
"""
Tabular MDPs: gridworld construction, exact planning, rollouts and policy evaluation.

Rewards are delivered on entering a state. A state-only reward table has shape
[n_states] and pays reward[s'] for a step (s, a, s'); a state-action table has
shape [n_states, n_actions] and pays reward[s, a]. Terminal states self-loop and
pay nothing further, so their values are 0.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from errors import ConfigurationError, NumericError, ShapeError

GRID_NAMES = ("cliff", "sparse", "trap")
# up, down, left, right, stay
GRID_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))
ACTION_NAMES = ("up", "down", "left", "right", "stay")

DEFAULT_GAMMA = 0.99
DEFAULT_MAX_STEPS = 100
DEFAULT_TOL = 1e-8
POLICY_EVAL_TOL = 1e-10
MAX_PERTURBATION = 0.8


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TabularMdp:
    """Finite MDP with an explicit transition tensor and ground-truth reward"""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    terminal: np.ndarray
    start_state: int
    name: str = "custom"
    grid_size: Optional[int] = None
    layout: Optional[str] = None

    def __post_init__(self):
        transition = np.asarray(self.transition, dtype=np.float64)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ShapeError(f"transition must be [S, A, S], got {transition.shape}")
        n_states, n_actions, _ = transition.shape

        reward = np.asarray(self.reward, dtype=np.float64)
        if reward.shape not in ((n_states,), (n_states, n_actions)):
            raise ShapeError(f"reward must be [{n_states}] or [{n_states}, {n_actions}], got {reward.shape}")

        terminal = np.asarray(self.terminal, dtype=bool)
        if terminal.shape != (n_states,):
            raise ShapeError(f"terminal must be [{n_states}], got {terminal.shape}")

        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0 <= self.start_state < n_states:
            raise ConfigurationError(f"start_state {self.start_state} outside [0, {n_states})")
        if np.any(transition < 0.0) or not np.allclose(transition.sum(axis=2), 1.0, rtol=0.0, atol=1e-9):
            raise NumericError("every transition row must be a probability distribution")

        for s in np.flatnonzero(terminal):
            if not np.allclose(transition[s, :, s], 1.0, rtol=0.0, atol=1e-9):
                raise ConfigurationError(f"terminal state {s} must self-loop with probability 1")

        object.__setattr__(self, "transition", _frozen(transition))
        object.__setattr__(self, "reward", _frozen(reward))
        object.__setattr__(self, "terminal", _frozen(terminal))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_reward(self, reward: np.ndarray) -> "TabularMdp":
        return dataclasses.replace(self, reward=reward)


@dataclass(frozen=True)
class Trajectory:
    """Chained (state, action, next_state) steps of one rollout"""

    steps: np.ndarray
    traj_id: str = "traj-0"
    truncated_at: Optional[int] = None

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64).reshape(-1, 3)
        if len(steps) == 0:
            raise ShapeError("a trajectory needs at least one step")
        if np.any(steps[1:, 0] != steps[:-1, 2]):
            raise ShapeError(f"trajectory {self.traj_id} steps do not chain")
        object.__setattr__(self, "steps", _frozen(steps))

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def states(self) -> np.ndarray:
        return self.steps[:, 0]

    @property
    def actions(self) -> np.ndarray:
        return self.steps[:, 1]

    @property
    def next_states(self) -> np.ndarray:
        return self.steps[:, 2]


@dataclass(frozen=True)
class QTable:
    values: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"Q table must be [S, A], got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise NumericError("Q table has non-finite entries")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def state_values(self) -> np.ndarray:
        return self.values.max(axis=1)


def _cell(row: int, col: int, size: int) -> int:
    return row * size + col


def build_grid_env(name: str, size: int = 10, gamma: float = DEFAULT_GAMMA) -> TabularMdp:
    """Build one of the gridworlds: cliff, sparse or trap.

    States are numbered row-major, the goal sits in the bottom-right corner and
    moves that would leave the grid keep the agent in place. Goal, cliff and trap
    cells are terminal.
    """
    if name not in GRID_NAMES:
        raise ConfigurationError(f"unknown grid '{name}', expected one of {GRID_NAMES}")
    if size < 3:
        raise ConfigurationError(f"grid size must be at least 3, got {size}")

    goal = (size - 1, size - 1)
    penalties: list = []
    if name == "sparse":
        start = (0, 0)
    elif name == "cliff":
        start = (size - 1, 0)
        penalties = [(size - 1, col) for col in range(1, size - 1)]
    else:
        if size < 4:
            raise ConfigurationError("the trap grid needs size >= 4 so the trap avoids start and goal")
        start = (0, 0)
        m = size // 2 - 1
        penalties = [(m, m), (m, m + 1), (m + 1, m), (m + 1, m + 1)]

    n_states = size * size
    n_actions = len(GRID_MOVES)
    reward = np.zeros(n_states)
    terminal = np.zeros(n_states, dtype=bool)
    reward[_cell(*goal, size)] = 1.0
    terminal[_cell(*goal, size)] = True
    for cell in penalties:
        reward[_cell(*cell, size)] = -1.0
        terminal[_cell(*cell, size)] = True

    transition = np.zeros((n_states, n_actions, n_states))
    for row in range(size):
        for col in range(size):
            s = _cell(row, col, size)
            for a, (dr, dc) in enumerate(GRID_MOVES):
                if terminal[s]:
                    transition[s, a, s] = 1.0
                    continue
                nr, nc = row + dr, col + dc
                if not (0 <= nr < size and 0 <= nc < size):
                    nr, nc = row, col
                transition[s, a, _cell(nr, nc, size)] = 1.0

    kind = "C" if name == "cliff" else "T"
    chars = [["."] * size for _ in range(size)]
    for row, col in penalties:
        chars[row][col] = kind
    chars[goal[0]][goal[1]] = "G"
    chars[start[0]][start[1]] = "S"
    layout = "\n".join("".join(line) for line in chars)

    logging.debug(f"Built grid_{name} with {n_states} states")
    return TabularMdp(
        transition=transition,
        reward=reward,
        gamma=gamma,
        terminal=terminal,
        start_state=_cell(*start, size),
        name=f"grid_{name}",
        grid_size=size,
        layout=layout,
    )


def render_layout(mdp: TabularMdp) -> str:
    """Plain-text grid, one character per cell (S/G/C/T/.)"""
    if mdp.layout is None:
        raise ConfigurationError(f"{mdp.name} has no grid layout")
    return mdp.layout


def perturb_random_action(mdp: TabularMdp, p_rand: float) -> TabularMdp:
    """Execute the intended action with probability 1 - p_rand, otherwise one of the others uniformly."""
    if not 0.0 <= p_rand <= 1.0:
        raise ConfigurationError(f"p_rand must lie in [0, 1], got {p_rand}")
    if p_rand > MAX_PERTURBATION:
        logging.warning(f"p_rand={p_rand} exceeds {MAX_PERTURBATION}: unintended actions outweigh the intended one")
    if p_rand == 0.0:
        return mdp

    n_actions = mdp.n_actions
    other = p_rand / (n_actions - 1)
    mixing = np.full((n_actions, n_actions), other)
    np.fill_diagonal(mixing, 1.0 - p_rand)
    transition = np.einsum("ab,sbt->sat", mixing, mdp.transition)
    return dataclasses.replace(mdp, transition=transition)


def expected_step_reward(mdp: TabularMdp, reward: Optional[np.ndarray] = None) -> np.ndarray:
    """Expected immediate reward [S, A]; zero from terminal states."""
    reward = mdp.reward if reward is None else np.asarray(reward, dtype=np.float64)
    if reward.shape == (mdp.n_states,):
        r_sa = mdp.transition @ reward
    elif reward.shape == (mdp.n_states, mdp.n_actions):
        r_sa = reward.copy()
    else:
        raise ShapeError(f"reward override has shape {reward.shape}")
    r_sa[mdp.terminal] = 0.0
    return r_sa


def step_rewards(reward: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Per-step rewards of (s, a, s') steps under a state-only or state-action table."""
    steps = np.asarray(steps).reshape(-1, 3)
    if reward.ndim == 1:
        return reward[steps[:, 2]]
    return reward[steps[:, 0], steps[:, 1]]


def value_iteration(
    mdp: TabularMdp,
    reward_override: Optional[np.ndarray] = None,
    tol: float = DEFAULT_TOL,
    max_iterations: int = 100_000,
) -> QTable:
    """Optimal action values by Bellman-optimality iteration.

    Returns Q whose sup-norm Bellman residual is at most tol.
    """
    if tol <= 0:
        raise ConfigurationError(f"tol must be positive, got {tol}")
    r_sa = expected_step_reward(mdp, reward_override)
    if not np.all(np.isfinite(r_sa)):
        raise NumericError("reward table has non-finite entries")

    live = ~mdp.terminal
    q = np.zeros_like(r_sa)
    residual = np.inf
    for iteration in range(1, max_iterations + 1):
        v = np.where(live, q.max(axis=1), 0.0)
        q_new = r_sa + mdp.gamma * (mdp.transition @ v)
        q_new[mdp.terminal] = 0.0
        residual = float(np.max(np.abs(q_new - q)))
        q = q_new
        if residual <= tol:
            return QTable(values=q, iterations=iteration, residual=residual)

    logging.warning(f"value_iteration stopped after {max_iterations} iterations, residual {residual:.3e}")
    return QTable(values=q, iterations=max_iterations, residual=residual)


def boltzmann_policy(q: QTable | np.ndarray, beta: float) -> np.ndarray:
    """pi(a|s) proportional to exp(beta * Q(s, a)), row-wise."""
    values = q.values if isinstance(q, QTable) else np.asarray(q, dtype=np.float64)
    if not np.isfinite(beta):
        raise NumericError(f"beta must be finite, got {beta}")
    if beta == 0.0:
        return np.full(values.shape, 1.0 / values.shape[1])
    return special.softmax(beta * values, axis=1)


def effective_horizon(gamma: float) -> float:
    return 1.0 / (1.0 - gamma)


def horizon_scaled_policy(q: QTable | np.ndarray, beta: float, gamma: float) -> np.ndarray:
    """Boltzmann policy over Q / (1 - gamma).

    A rationality beta then prices one step of delay on a unit reward at about
    beta, whatever the discount.
    """
    values = q.values if isinstance(q, QTable) else np.asarray(q, dtype=np.float64)
    return boltzmann_policy(values * effective_horizon(gamma), beta)


def uniform_policy(mdp: TabularMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def greedy_policy(q: QTable | np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Deterministic argmax policy; values within atol of the row maximum tie and go to the lowest action index."""
    values = q.values if isinstance(q, QTable) else np.asarray(q, dtype=np.float64)
    scale = max(1.0, float(np.max(np.abs(values))))
    best = values >= values.max(axis=1, keepdims=True) - atol * scale
    actions = np.argmax(best, axis=1)
    policy = np.zeros_like(values)
    policy[np.arange(len(values)), actions] = 1.0
    return policy


def _validate_policy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeError(f"policy must be [{mdp.n_states}, {mdp.n_actions}], got {policy.shape}")
    if not np.allclose(policy.sum(axis=1), 1.0, rtol=0.0, atol=1e-9):
        raise NumericError("policy rows must sum to 1")
    return policy


def rollout(
    mdp: TabularMdp,
    policy: np.ndarray,
    max_steps: int,
    rng: np.random.Generator,
    traj_id: str = "traj-0",
    start_state: Optional[int] = None,
) -> Trajectory:
    """Sample one trajectory from the start state until a terminal state or max_steps."""
    if max_steps < 1:
        raise ConfigurationError(f"max_steps must be at least 1, got {max_steps}")
    state = mdp.start_state if start_state is None else int(start_state)
    if not 0 <= state < mdp.n_states:
        raise ConfigurationError(f"start state {state} outside [0, {mdp.n_states})")
    policy = _validate_policy(mdp, policy)
    policy_cdf = np.cumsum(policy, axis=1)
    transition_cdf = np.cumsum(mdp.transition, axis=2)

    steps = []
    for _ in range(max_steps):
        action = int(np.searchsorted(policy_cdf[state], rng.random() * policy_cdf[state, -1], side="right"))
        action = min(action, mdp.n_actions - 1)
        row = transition_cdf[state, action]
        next_state = int(np.searchsorted(row, rng.random() * row[-1], side="right"))
        next_state = min(next_state, mdp.n_states - 1)
        steps.append((state, action, next_state))
        if mdp.terminal[state] or mdp.terminal[next_state]:
            return Trajectory(steps=np.array(steps), traj_id=traj_id)
        state = next_state
    return Trajectory(steps=np.array(steps), traj_id=traj_id, truncated_at=max_steps)


def state_visit_distribution(mdp: TabularMdp, policy: np.ndarray, max_steps: int) -> np.ndarray:
    """Exact expected share of visits per state over the steps of a rollout of at most max_steps."""
    policy = _validate_policy(mdp, policy)
    chain = np.einsum("sa,sat->st", policy, mdp.transition)
    live = ~mdp.terminal
    dist = np.zeros(mdp.n_states)
    dist[mdp.start_state] = 1.0
    visits = np.zeros(mdp.n_states)
    for _ in range(max_steps):
        visits += dist
        dist = (dist * live) @ chain
    return visits / visits.sum()


def policy_value(
    mdp: TabularMdp,
    policy: np.ndarray,
    reward_override: Optional[np.ndarray] = None,
    tol: float = POLICY_EVAL_TOL,
    max_iterations: int = 1_000_000,
) -> float:
    """Expected discounted return of a policy from the start state (iterative policy evaluation)."""
    policy = _validate_policy(mdp, policy)
    r_sa = expected_step_reward(mdp, reward_override)
    r_pi = np.sum(policy * r_sa, axis=1)
    chain = np.einsum("sa,sat->st", policy, mdp.transition)
    live = ~mdp.terminal

    v = np.zeros(mdp.n_states)
    for _ in range(max_iterations):
        v_new = np.where(live, r_pi + mdp.gamma * (chain @ v), 0.0)
        residual = np.max(np.abs(v_new - v))
        v = v_new
        if residual <= tol:
            break
    else:
        logging.warning(f"policy evaluation stopped at residual {residual:.3e}")
    return float(v[mdp.start_state])


def optimal_value(mdp: TabularMdp) -> float:
    """Value of the greedy policy on the true reward (the 100-point anchor)."""
    return policy_value(mdp, greedy_policy(value_iteration(mdp)))


def random_value(mdp: TabularMdp) -> float:
    """Value of the uniform policy (the 0-point anchor)."""
    return policy_value(mdp, uniform_policy(mdp))


def sample_trajectories(
    mdp: TabularMdp,
    policy: np.ndarray,
    n: int,
    max_steps: int,
    rng: np.random.Generator,
    prefix: str = "traj",
) -> list:
    return [rollout(mdp, policy, max_steps, rng, traj_id=f"{prefix}-{i}") for i in range(n)]


def discounted_return(reward: np.ndarray, trajectory: Trajectory, gamma: float) -> float:
    rewards = step_rewards(reward, trajectory.steps)
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))
