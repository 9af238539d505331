#!/usr/bin/env python3
"""
Evaluation of learned rewards: planning on the inferred mean, normalized
returns, EPIC distances, the behavioral-cloning baseline, robustness under
random-action perturbations and reward heatmaps.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from errors import DegenerateEnvironmentError, EmptyDatasetError, ShapeError
from feedback import DemoObs
from mdp import (
    TabularMdp,
    Trajectory,
    greedy_policy,
    optimal_value,
    perturb_random_action,
    policy_value,
    random_value,
    value_iteration,
)
from storage import read_csv_exact, write_csv_atomic, write_text_atomic

ROBUSTNESS_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8)
REPORT_COLUMNS = ("env", "budget", "modalities", "seed", "metric", "value")


@dataclass(frozen=True)
class InferredReward:
    """Tabulated posterior mean and variance of the learned reward"""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        variance = np.asarray(self.variance, dtype=np.float64)
        if mean.shape != variance.shape:
            raise ShapeError(f"mean {mean.shape} and variance {variance.shape} differ")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(variance))) or np.any(variance <= 0):
            raise ShapeError("inferred reward needs finite means and positive variances")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)


@dataclass(frozen=True)
class FixedPolicy:
    """A policy evaluated as-is under perturbed dynamics (no re-planning)"""

    policy: np.ndarray
    label: str = "imitation"


@dataclass(frozen=True)
class RobustnessPoint:
    level: float
    mean: float
    se: float
    values: tuple = ()


@dataclass
class EvalReport:
    """Per-seed metrics of one configuration; mean and standard error come from the seed lists"""

    normalized_returns: List[float] = field(default_factory=list)
    raw_returns: List[float] = field(default_factory=list)
    epics: List[float] = field(default_factory=list)
    robustness: List[RobustnessPoint] = field(default_factory=list)

    @property
    def normalized_return(self) -> float:
        return float(np.mean(self.normalized_returns))

    @property
    def epic(self) -> Optional[float]:
        return float(np.mean(self.epics)) if self.epics else None

    def to_rows(self, env: str, budget: str, modalities: str, seeds: Sequence[int]) -> List[Dict]:
        """One row per (seed, metric), then 'mean' and 'se' rows per metric"""
        metrics: Dict[str, List[float]] = {
            "normalized_return": list(self.normalized_returns),
            "raw_return": list(self.raw_returns),
        }
        if self.epics:
            metrics["epic"] = list(self.epics)
        for point in self.robustness:
            metrics[f"robust_p{point.level:.1f}"] = list(point.values)

        rows = []
        for index, seed in enumerate(seeds):
            for metric, values in metrics.items():
                rows.append(dict(env=env, budget=budget, modalities=modalities, seed=str(seed), metric=metric, value=values[index]))
        for metric, values in metrics.items():
            mean, se = mean_and_se(values)
            rows.append(dict(env=env, budget=budget, modalities=modalities, seed="mean", metric=metric, value=mean))
            rows.append(dict(env=env, budget=budget, modalities=modalities, seed="se", metric=metric, value=se))
        return rows


def mean_and_se(values: Sequence[float]) -> tuple:
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        raise EmptyDatasetError("no values to aggregate")
    se = 0.0 if len(values) < 2 else float(np.std(values, ddof=1) / np.sqrt(len(values)))
    return float(np.mean(values)), se


def extract_inferred_reward(encoder, mdp: TabularMdp) -> InferredReward:
    """Tabulate the encoder's mean and variance.

    State rewards give [S] tables indexed by the entered state. State-action
    rewards give [S, A] tables, averaging over next states with the MDP's
    transition probabilities.
    """
    encoder = getattr(encoder, "encoder", encoder)
    n_states, n_actions = mdp.n_states, mdp.n_actions
    with torch.no_grad():
        if encoder.reward_type == "state":
            steps = torch.zeros((n_states, 3), dtype=torch.int64)
            steps[:, 2] = torch.arange(n_states)
            mu, logvar = encoder(steps)
            return InferredReward(mean=mu.numpy().copy(), variance=torch.exp(logvar).numpy().copy())

        s, a, t = torch.meshgrid(
            torch.arange(n_states), torch.arange(n_actions), torch.arange(n_states), indexing="ij"
        )
        mu, logvar = encoder(torch.stack([s, a, t], dim=-1))
    weights = mdp.transition
    mean = np.sum(weights * mu.numpy(), axis=2)
    variance = np.sum(weights * np.exp(logvar.numpy()), axis=2)
    return InferredReward(mean=mean, variance=variance)


def plan_on_inferred(mdp: TabularMdp, mean: np.ndarray) -> np.ndarray:
    """Greedy policy for the inferred reward; ties go to the lowest action index"""
    if isinstance(mean, InferredReward):
        mean = mean.mean
    return greedy_policy(value_iteration(mdp, reward_override=mean))


def normalized_return(raw: float, v_opt: float, v_rand: float) -> float:
    """0 for the uniform-policy value, 100 for the optimal value"""
    if v_opt == v_rand:
        raise DegenerateEnvironmentError(f"optimal and random values coincide ({v_opt})")
    return 100.0 * ((raw - v_rand) / (v_opt - v_rand))


@dataclass(frozen=True)
class EpicCoverage:
    """Distributions over states and actions used to canonicalize and to weight the correlation"""

    states: np.ndarray
    actions: np.ndarray

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "EpicCoverage":
        return cls(states=np.full(n_states, 1.0 / n_states), actions=np.full(n_actions, 1.0 / n_actions))


def _transition_reward(table: np.ndarray, n_states: int, n_actions: int) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        raise ShapeError("reward table has non-finite entries")
    if table.shape == (n_states,):
        return np.broadcast_to(table[None, None, :], (n_states, n_actions, n_states))
    if table.shape == (n_states, n_actions):
        return np.broadcast_to(table[:, :, None], (n_states, n_actions, n_states))
    if table.shape == (n_states, n_actions, n_states):
        return table
    raise ShapeError(f"reward table shape {table.shape} fits neither [S], [S, A] nor [S, A, S]")


def canonicalize_reward(reward: np.ndarray, gamma: float, coverage: EpicCoverage) -> np.ndarray:
    """C(s,a,s') = R(s,a,s') + gamma E[R(s',A,S')] - E[R(s,A,S')] - gamma E[R(S,A,S')]"""
    mean_from = np.einsum("xat,a,t->x", reward, coverage.actions, coverage.states)
    overall = float(coverage.states @ mean_from)
    return reward + gamma * mean_from[None, None, :] - mean_from[:, None, None] - gamma * overall


def epic_distance(
    reward_a: np.ndarray,
    reward_b: np.ndarray,
    mdp: TabularMdp,
    gamma: Optional[float] = None,
    coverage: Optional[EpicCoverage] = None,
) -> float:
    """Pearson distance sqrt((1 - rho) / 2) between canonicalized rewards, in [0, 1].

    A canonical reward with zero variance gives distance 0 against another
    zero-variance reward and 1 against anything else.
    """
    n_states, n_actions = mdp.n_states, mdp.n_actions
    gamma = mdp.gamma if gamma is None else gamma
    coverage = coverage or EpicCoverage.uniform(n_states, n_actions)
    weights = np.einsum("s,a,t->sat", coverage.states, coverage.actions, coverage.states)

    standardized = []
    for table in (reward_a, reward_b):
        canonical = canonicalize_reward(_transition_reward(table, n_states, n_actions), gamma, coverage)
        centred = canonical - np.sum(weights * canonical)
        std = float(np.sqrt(np.sum(weights * centred ** 2)))
        scale = max(1.0, float(np.max(np.abs(canonical))))
        standardized.append(None if std <= 1e-12 * scale else centred / std)

    z_a, z_b = standardized
    if z_a is None or z_b is None:
        return 0.0 if z_a is None and z_b is None else 1.0
    distance = 0.5 * float(np.sqrt(np.sum(weights * (z_a - z_b) ** 2)))
    return min(1.0, distance)


def behavioral_cloning(demos: Sequence[Union[DemoObs, Trajectory]], mdp: TabularMdp) -> np.ndarray:
    """Laplace-smoothed (+1) action frequencies per state; unvisited states stay uniform"""
    if not demos:
        raise EmptyDatasetError("behavioral cloning needs at least one demonstration")
    counts = np.ones((mdp.n_states, mdp.n_actions))
    for demo in demos:
        steps = demo.trajectory.steps if isinstance(demo, DemoObs) else demo.steps
        np.add.at(counts, (steps[:, 0], steps[:, 1]), 1.0)
    return counts / counts.sum(axis=1, keepdims=True)


def robustness_sweep(
    subjects: Sequence[Union[InferredReward, np.ndarray, FixedPolicy]],
    mdp: TabularMdp,
    levels: Sequence[float] = ROBUSTNESS_LEVELS,
) -> List[RobustnessPoint]:
    """Normalized return per perturbation level, one subject per seed.

    Reward subjects are re-planned on the perturbed dynamics; fixed policies are
    evaluated unchanged. Anchors always come from the unperturbed environment.
    """
    if not subjects:
        raise EmptyDatasetError("robustness sweep needs at least one subject")
    v_opt = optimal_value(mdp)
    v_rand = random_value(mdp)

    curve = []
    for level in levels:
        perturbed = perturb_random_action(mdp, level)
        values = []
        for subject in subjects:
            if isinstance(subject, FixedPolicy):
                policy = subject.policy
            else:
                policy = plan_on_inferred(perturbed, subject)
            raw = policy_value(perturbed, policy, reward_override=mdp.reward)
            values.append(normalized_return(raw, v_opt, v_rand))
        mean, se = mean_and_se(values)
        curve.append(RobustnessPoint(level=float(level), mean=mean, se=se, values=tuple(values)))
        logging.debug(f"{mdp.name} p_rand={level}: normalized return {mean:.2f} +/- {se:.2f}")
    return curve


def evaluate_policy(mdp: TabularMdp, policy: np.ndarray) -> tuple:
    """(raw return, normalized return) of a policy on the true reward"""
    raw = policy_value(mdp, policy)
    return raw, normalized_return(raw, optimal_value(mdp), random_value(mdp))


def _normalize_table(table: np.ndarray) -> np.ndarray:
    low, high = float(np.min(table)), float(np.max(table))
    if high == low:
        return np.zeros_like(table)
    return (table - low) / (high - low)


def heatmap_grids(inferred: InferredReward, grid_size: int, normalize: bool = True) -> Dict[str, np.ndarray]:
    """Mean and variance as grid_size x grid_size arrays (state-action tables are averaged over actions)"""
    grids = {}
    for name, table in (("mean", inferred.mean), ("variance", inferred.variance)):
        per_state = table if table.ndim == 1 else table.mean(axis=1)
        if per_state.size != grid_size * grid_size:
            raise ShapeError(f"{per_state.size} states do not form a {grid_size}x{grid_size} grid")
        grid = per_state.reshape(grid_size, grid_size)
        grids[name] = _normalize_table(grid) if normalize else grid
    return grids


def export_heatmap(
    inferred: InferredReward,
    grid_size: int,
    output_dir: str,
    normalize: bool = True,
    image: bool = False,
    layout: Optional[str] = None,
) -> Dict[str, str]:
    """Write reward_mean.csv and reward_variance.csv (plus layout.txt / heatmap.png when asked)"""
    grids = heatmap_grids(inferred, grid_size, normalize)
    paths = {}
    for name, grid in grids.items():
        path = os.path.join(output_dir, f"reward_{name}.csv")
        write_csv_atomic(pd.DataFrame(grid), path, header=False)
        paths[name] = path
    if layout is not None:
        paths["layout"] = os.path.join(output_dir, "layout.txt")
        write_text_atomic(paths["layout"], layout + "\n")
    if image:
        paths["image"] = _render_heatmap(grids, os.path.join(output_dir, "heatmap.png"))
    logging.info(f"Exported heatmap grids to {output_dir}")
    return paths


def read_heatmap(path: str) -> np.ndarray:
    return read_csv_exact(path, header=None).to_numpy(dtype=np.float64)


def _render_heatmap(grids: Dict[str, np.ndarray], path: str) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(grids), figsize=(4 * len(grids), 4))
    for ax, (name, grid) in zip(np.atleast_1d(axes), grids.items()):
        shown = ax.imshow(grid, cmap="viridis")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(shown, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
