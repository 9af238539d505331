#!/usr/bin/env python3
"""
Simulated feedback: preferences, demonstrations, ratings and stops.

Every observation is grounded in steps of a source trajectory. Segment returns
are normalized per step (sum of rewards divided by the nominal segment length L)
both here and in the training likelihoods.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from errors import ConfigurationError, EmptyDatasetError, ShapeError
from mdp import QTable, TabularMdp, Trajectory, horizon_scaled_policy, rollout, step_rewards
from storage import write_text_atomic

FORMAT_VERSION = "mavrl-feedback v1"
MODALITIES = ("P", "D", "R", "S")
MODALITY_NAMES = {"P": "preference", "D": "demonstration", "R": "rating", "S": "stop"}
# markers in the a' column of a TD row
NEXT_GREEDY = -1  # bootstrap from max_b Q(s', b)
NEXT_TERMINAL = -2  # s' is terminal, Q(s') = 0


@dataclass(frozen=True)
class Segment:
    """A window of at most L consecutive steps cut from a source trajectory"""

    steps: np.ndarray
    source_traj: str
    start_index: int
    L: int

    def __post_init__(self):
        steps = np.array(self.steps, dtype=np.int64).reshape(-1, 3)
        if len(steps) == 0 or len(steps) > self.L:
            raise ShapeError(f"segment length {len(steps)} must lie in [1, {self.L}]")
        if np.any(steps[1:, 0] != steps[:-1, 2]):
            raise ShapeError("segment steps do not chain")
        steps.setflags(write=False)
        object.__setattr__(self, "steps", steps)

    @property
    def length(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class PreferenceObs:
    seg_a: Segment
    seg_b: Segment
    label: int  # 1 when seg_a is preferred


@dataclass(frozen=True)
class DemoObs:
    trajectory: Trajectory


@dataclass(frozen=True)
class RatingObs:
    segment: Segment
    rating: int


@dataclass(frozen=True)
class StopObs:
    segment: Segment
    stop_time: Optional[int]  # 1-based step of the stop; None when censored

    @property
    def censored(self) -> bool:
        return self.stop_time is None


@dataclass(frozen=True)
class SimulatorParams:
    """Rationality temperatures and shape constants of the feedback simulators"""

    beta_traj: float = 0.0
    beta_pref: float = 5.0
    beta_demo: float = 10.0
    L: int = 10
    K: int = 5
    c: float = 1.0
    rho: float = 0.1
    ref_percentile: float = 50.0
    max_steps: int = 100
    pool_size: int = 200
    pool_steps: int = 10
    pool_random_start: bool = True

    def __post_init__(self):
        if self.K < 2:
            raise ConfigurationError(f"K must be at least 2, got {self.K}")
        if self.L < 1:
            raise ConfigurationError(f"L must be at least 1, got {self.L}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in (0, 1], got {self.rho}")
        if self.c <= 0.0:
            raise ConfigurationError(f"c must be positive, got {self.c}")
        if not 0.0 <= self.ref_percentile <= 100.0:
            raise ConfigurationError(f"ref_percentile must lie in [0, 100], got {self.ref_percentile}")
        if self.max_steps < 1 or self.pool_size < 1 or self.pool_steps < 1:
            raise ConfigurationError("max_steps, pool_size and pool_steps must be positive")


@dataclass
class FeedbackDataset:
    """The four observation collections plus the trajectories they were cut from"""

    n_states: int
    n_actions: int
    preferences: List[PreferenceObs] = field(default_factory=list)
    demonstrations: List[DemoObs] = field(default_factory=list)
    ratings: List[RatingObs] = field(default_factory=list)
    stops: List[StopObs] = field(default_factory=list)
    trajectories: Dict[str, Trajectory] = field(default_factory=dict)
    rating_levels: int = 5

    def by_modality(self, modality: str) -> list:
        return {
            "P": self.preferences,
            "D": self.demonstrations,
            "R": self.ratings,
            "S": self.stops,
        }[modality]

    def present_modalities(self) -> str:
        return "".join(m for m in MODALITIES if self.by_modality(m))

    def is_empty(self) -> bool:
        return not self.present_modalities()

    def counts(self) -> Dict[str, int]:
        return {MODALITY_NAMES[m]: len(self.by_modality(m)) for m in MODALITIES}

    def restricted_to(self, modalities: str) -> "FeedbackDataset":
        """Copy keeping only the given modality letters"""
        return FeedbackDataset(
            n_states=self.n_states,
            n_actions=self.n_actions,
            preferences=list(self.preferences) if "P" in modalities else [],
            demonstrations=list(self.demonstrations) if "D" in modalities else [],
            ratings=list(self.ratings) if "R" in modalities else [],
            stops=list(self.stops) if "S" in modalities else [],
            trajectories=dict(self.trajectories),
            rating_levels=self.rating_levels,
        )


def normalized_return(segment: Segment, reward: np.ndarray) -> float:
    """Undiscounted segment return divided by the nominal length L"""
    return float(np.sum(step_rewards(reward, segment.steps)) / segment.L)


def collect_trajectories(
    mdp: TabularMdp,
    q: QTable,
    beta_traj: float,
    n_traj: int,
    max_steps: int,
    rng: np.random.Generator,
    prefix: str = "pool",
    random_start: bool = False,
) -> List[Trajectory]:
    """Rollouts of the Boltzmann-rational policy over Q*.

    With random_start each rollout begins in a uniformly drawn non-terminal
    state instead of the MDP's start state.
    """
    policy = horizon_scaled_policy(q, beta_traj, mdp.gamma)
    starts = np.flatnonzero(~mdp.terminal)
    trajectories = []
    for i in range(n_traj):
        start = int(rng.choice(starts)) if random_start else None
        trajectories.append(rollout(mdp, policy, max_steps, rng, traj_id=f"{prefix}-{i}", start_state=start))
    return trajectories


def sample_segments(
    trajectories: Sequence[Trajectory],
    L: int,
    n: int,
    rng: np.random.Generator,
) -> List[Segment]:
    """Draw n segments uniformly over valid (trajectory, start) pairs"""
    if not trajectories:
        raise EmptyDatasetError("cannot sample segments from an empty trajectory pool")
    if n < 1:
        raise ConfigurationError(f"n must be at least 1, got {n}")

    windows = np.array([max(len(t) - L + 1, 1) for t in trajectories])
    offsets = np.concatenate([[0], np.cumsum(windows)])
    picks = rng.integers(0, offsets[-1], size=n)

    segments = []
    for pick in picks:
        index = int(np.searchsorted(offsets, pick, side="right") - 1)
        start = int(pick - offsets[index])
        traj = trajectories[index]
        segments.append(
            Segment(steps=traj.steps[start:start + L], source_traj=traj.traj_id, start_index=start, L=L)
        )
    return segments


def preference_probability(return_a: float, return_b: float, beta_pref: float) -> float:
    """Bradley-Terry probability that the first segment is preferred"""
    return float(special.expit(beta_pref * (return_a - return_b)))


def simulate_preferences(
    segments: Sequence[Segment],
    true_reward: np.ndarray,
    beta_pref: float,
    n_pairs: int,
    rng: np.random.Generator,
) -> List[PreferenceObs]:
    if not segments:
        raise EmptyDatasetError("preferences need at least one segment")

    returns = np.array([normalized_return(s, true_reward) for s in segments])
    observations = []
    for _ in range(n_pairs):
        if len(segments) > 1:
            i, j = rng.choice(len(segments), size=2, replace=False)
        else:
            i = j = 0
        p = preference_probability(returns[i], returns[j], beta_pref)
        label = int(rng.random() < p)
        observations.append(PreferenceObs(seg_a=segments[i], seg_b=segments[j], label=label))
    return observations


def simulate_demonstrations(
    mdp: TabularMdp,
    q: QTable,
    beta_demo: float,
    n_demo: int,
    max_steps: int,
    rng: np.random.Generator,
) -> List[DemoObs]:
    trajectories = collect_trajectories(mdp, q, beta_demo, n_demo, max_steps, rng, prefix="demo")
    return [DemoObs(trajectory=t) for t in trajectories]


def rating_cutpoints(returns: np.ndarray, K: int) -> np.ndarray:
    """Quantile cutpoints at the (100 k / K)-th percentiles, k = 1..K-1"""
    return np.percentile(returns, [100.0 * k / K for k in range(1, K)])


def assign_ratings(returns: np.ndarray, K: int) -> Tuple[np.ndarray, np.ndarray]:
    """Ratings 1..K from quantile bins.

    A return equal to several coincident cutpoints spans the categories between
    them and gets the middle one (the lower middle for an even span); all-equal
    returns therefore get ceil(K/2).
    """
    returns = np.asarray(returns, dtype=np.float64)
    cutpoints = rating_cutpoints(returns, K)
    if np.all(returns == returns[0]):
        middle = math.ceil(K / 2)
        logging.warning(f"All {len(returns)} rated segments share one return; rating all of them {middle}")
        return np.full(len(returns), middle), cutpoints
    below = np.searchsorted(cutpoints, returns, side="left")
    at_or_below = np.searchsorted(cutpoints, returns, side="right")
    return (below + at_or_below + 2) // 2, cutpoints


def simulate_ratings(
    segments: Sequence[Segment],
    true_reward: np.ndarray,
    K: int,
) -> Tuple[List[RatingObs], np.ndarray]:
    """Rate each segment by the quantile bin its normalized return falls into.

    Rating k means cutpoint[k-1] < return <= cutpoint[k], outermost bins open.
    """
    if K < 2:
        raise ConfigurationError(f"K must be at least 2, got {K}")
    if len(segments) < K:
        raise EmptyDatasetError(f"ratings need at least K={K} segments, got {len(segments)}")

    returns = np.array([normalized_return(s, true_reward) for s in segments])
    ratings, cutpoints = assign_ratings(returns, K)
    observations = [RatingObs(segment=s, rating=int(r)) for s, r in zip(segments, ratings)]
    return observations, cutpoints


def instantaneous_regret(q: QTable, steps: np.ndarray) -> np.ndarray:
    """max_b Q(s_t, b) - Q(s_t, a_t) for each step"""
    values = q.values
    return values[steps[:, 0]].max(axis=1) - values[steps[:, 0], steps[:, 1]]


def cumulative_regret(regret: np.ndarray, rho: float) -> np.ndarray:
    """R_t = rho * R_{t-1} + regret_t, starting from R_0 = 0"""
    out = np.empty(len(regret))
    running = 0.0
    for t, delta in enumerate(regret):
        running = rho * running + delta
        out[t] = running
    return out


def stop_hazards(cum_regret: np.ndarray, lam: float) -> np.ndarray:
    return -np.expm1(-lam * cum_regret)


def calibrate_stop_sensitivity(segments: Sequence[Segment], q: QTable, params: SimulatorParams) -> float:
    """lambda = c / R_ref with R_ref the reference percentile of per-segment peak cumulative regret.

    Returns 0.0 (nobody ever stops) when the reference regret is not positive.
    """
    if not segments:
        raise EmptyDatasetError("stop calibration needs at least one segment")
    peaks = np.array([
        cumulative_regret(instantaneous_regret(q, s.steps), params.rho).max() for s in segments
    ])
    reference = float(np.percentile(peaks, params.ref_percentile))
    if reference <= 0.0:
        logging.warning("Reference regret is zero: every stop observation will be censored")
        return 0.0
    return params.c / reference


def simulate_stops(
    segments: Sequence[Segment],
    q: QTable,
    params: SimulatorParams,
    rng: np.random.Generator,
    lam: Optional[float] = None,
) -> List[StopObs]:
    """Sample stop times step by step from the regret hazard; no stop means right-censored"""
    if lam is None:
        lam = calibrate_stop_sensitivity(segments, q, params)

    observations = []
    for segment in segments:
        hazards = stop_hazards(cumulative_regret(instantaneous_regret(q, segment.steps), params.rho), lam)
        stop_time = None
        for t, hazard in enumerate(hazards, start=1):
            if rng.random() < hazard:
                stop_time = t
                break
        observations.append(StopObs(segment=segment, stop_time=stop_time))
    return observations


def _observation_segments(dataset: FeedbackDataset) -> List[Segment]:
    segments = []
    for obs in dataset.preferences:
        segments.extend([obs.seg_a, obs.seg_b])
    segments.extend(obs.segment for obs in dataset.ratings)
    segments.extend(obs.segment for obs in dataset.stops)
    return segments


def extract_transitions(dataset: FeedbackDataset) -> np.ndarray:
    """Transition pool (s, a, s', a') for the TD loss.

    Consecutive step pairs of every segment and demonstration, deduplicated by
    position in the source trajectory. Returns an int array of shape [N, 4].
    """
    seen = set()
    rows = []

    def add(traj_id: str, start: int, steps: np.ndarray):
        for j in range(len(steps) - 1):
            key = (traj_id, start + j)
            if key in seen:
                continue
            seen.add(key)
            s, a, s_next = steps[j]
            rows.append((s, a, s_next, steps[j + 1, 1]))

    for demo in dataset.demonstrations:
        add(demo.trajectory.traj_id, 0, demo.trajectory.steps)
    for segment in _observation_segments(dataset):
        add(segment.source_traj, segment.start_index, segment.steps)

    if not rows:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array(rows, dtype=np.int64)


def bellman_transitions(mdp: TabularMdp) -> np.ndarray:
    """TD rows (s, a, s', marker) for every non-terminal state-action of a known MDP.

    One row per successor with positive probability. The a' column holds
    NEXT_TERMINAL when s' is terminal and NEXT_GREEDY otherwise.
    """
    rows = []
    for s in np.flatnonzero(~mdp.terminal):
        for a in range(mdp.n_actions):
            for s_next in np.flatnonzero(mdp.transition[s, a] > 0.0):
                marker = NEXT_TERMINAL if mdp.terminal[s_next] else NEXT_GREEDY
                rows.append((s, a, s_next, marker))
    if not rows:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array(rows, dtype=np.int64)


def _format_segment(segment: Segment) -> str:
    return f"{segment.source_traj} {segment.start_index} {segment.length} {segment.L}"


def save_dataset(dataset: FeedbackDataset, path: str) -> None:
    """Write the dataset in the line-oriented text format (see FORMATS.md)"""
    lines = [
        f"# {FORMAT_VERSION}",
        f"M {dataset.n_states} {dataset.n_actions} {dataset.rating_levels}",
    ]
    trajectories = dict(dataset.trajectories)
    for demo in dataset.demonstrations:
        trajectories.setdefault(demo.trajectory.traj_id, demo.trajectory)
    for traj_id in sorted(trajectories):
        traj = trajectories[traj_id]
        steps = " ".join(f"{s}:{a}:{n}" for s, a, n in traj.steps)
        truncated = "-" if traj.truncated_at is None else str(traj.truncated_at)
        lines.append(f"T {traj_id} {truncated} {steps}")
    for obs in dataset.preferences:
        lines.append(f"P {_format_segment(obs.seg_a)} {_format_segment(obs.seg_b)} {obs.label}")
    for obs in dataset.demonstrations:
        lines.append(f"D {obs.trajectory.traj_id}")
    for obs in dataset.ratings:
        lines.append(f"R {_format_segment(obs.segment)} {obs.rating}")
    for obs in dataset.stops:
        stop = "-" if obs.stop_time is None else str(obs.stop_time)
        lines.append(f"S {_format_segment(obs.segment)} {stop}")
    write_text_atomic(path, "\n".join(lines) + "\n")
    logging.info(f"Saved feedback dataset to {path} ({dataset.counts()})")


def load_dataset(path: str) -> FeedbackDataset:
    with open(path) as handle:
        lines = [line.rstrip("\n") for line in handle if line.strip()]
    if not lines or lines[0] != f"# {FORMAT_VERSION}":
        raise ConfigurationError(f"{path} is not a '{FORMAT_VERSION}' file")

    dataset: Optional[FeedbackDataset] = None
    trajectories: Dict[str, Trajectory] = {}

    def segment(tokens: List[str]) -> Segment:
        traj_id, start, length, L = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
        steps = trajectories[traj_id].steps[start:start + length]
        return Segment(steps=steps, source_traj=traj_id, start_index=start, L=L)

    for number, line in enumerate(lines[1:], start=2):
        tag, *tokens = line.split()
        try:
            if tag == "M":
                dataset = FeedbackDataset(
                    n_states=int(tokens[0]), n_actions=int(tokens[1]), rating_levels=int(tokens[2])
                )
            elif tag == "T":
                steps = [tuple(int(x) for x in step.split(":")) for step in tokens[2:]]
                truncated = None if tokens[1] == "-" else int(tokens[1])
                trajectories[tokens[0]] = Trajectory(steps=np.array(steps), traj_id=tokens[0], truncated_at=truncated)
            elif tag == "P":
                dataset.preferences.append(
                    PreferenceObs(seg_a=segment(tokens[0:4]), seg_b=segment(tokens[4:8]), label=int(tokens[8]))
                )
            elif tag == "D":
                dataset.demonstrations.append(DemoObs(trajectory=trajectories[tokens[0]]))
            elif tag == "R":
                dataset.ratings.append(RatingObs(segment=segment(tokens[0:4]), rating=int(tokens[4])))
            elif tag == "S":
                stop = None if tokens[4] == "-" else int(tokens[4])
                dataset.stops.append(StopObs(segment=segment(tokens[0:4]), stop_time=stop))
            else:
                raise ConfigurationError(f"unknown tag '{tag}'")
        except (IndexError, KeyError, ValueError, AttributeError) as e:
            raise ConfigurationError(f"{path}:{number}: malformed line ({e})") from e

    if dataset is None:
        raise ConfigurationError(f"{path} has no 'M' header line")
    demo_ids = {obs.trajectory.traj_id for obs in dataset.demonstrations}
    dataset.trajectories = {k: v for k, v in trajectories.items() if k not in demo_ids}
    return dataset

