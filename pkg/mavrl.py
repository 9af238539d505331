#!/usr/bin/env python3
"""
Multi-modal variational reward learning.

A shared reward encoder q(R | s, a, s') = N(mu, sigma^2) and an auxiliary
Q-network are trained jointly from whatever feedback is present: pairwise
preferences, demonstrations, ordinal ratings and stop (intervention) signals.
The objective is the sum of the per-modality negative log-likelihoods plus a
KL penalty towards N(0, 1) and a TD-consistency term tying the encoder to the
one-step Bellman differences of the Q-network.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from errors import ConfigurationError, DivergenceError, EmptyDatasetError, NumericError, ShapeError
from feedback import NEXT_GREEDY, NEXT_TERMINAL, FeedbackDataset, Segment, bellman_transitions, extract_transitions
from mdp import TabularMdp, effective_horizon
from networks import (
    DTYPE,
    ClippedAdamW,
    Mlp,
    OptimizerSettings,
    backward,
    clamp_logvar,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
)
from storage import read_csv_exact, write_csv_atomic

REWARD_TYPES = ("state", "state_action")
LOSS_TERMS = ("preference", "demonstration", "rating", "stop", "kl", "td")
CURVE_COLUMNS = ("step",) + LOSS_TERMS + ("total",)
PROBABILITY_FLOOR = 1e-12
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
CHECKPOINT_FILE = "checkpoint.txt"
LOSS_CURVE_FILE = "loss_curve.csv"


@dataclass(frozen=True)
class TrainConfig:
    lambda_kl: float = 1.0
    lambda_td: float = 1.0
    batch_size: int = 32
    learning_rate: float = 1e-3
    steps: int = 3000
    gamma: float = 0.99
    beta_pref: float = 5.0
    beta_demo: float = 10.0
    stop_lambda: float = 1.0
    stop_rho: float = 0.1
    hidden: int = 64
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    reward_type: str = "state"
    seed: int = 0
    log_every: int = 1000
    progress: bool = False

    def __post_init__(self):
        if self.lambda_kl < 0 or self.lambda_td < 0:
            raise ConfigurationError("lambda_kl and lambda_td must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.stop_lambda < 0 or not 0.0 <= self.stop_rho <= 1.0:
            raise ConfigurationError("stop_lambda must be >= 0 and stop_rho in [0, 1]")
        if self.hidden < 1:
            raise ConfigurationError("hidden must be at least 1")
        if self.reward_type not in REWARD_TYPES:
            raise ConfigurationError(f"reward_type must be one of {REWARD_TYPES}, got '{self.reward_type}'")

    @property
    def demo_logit_scale(self) -> float:
        """Logit scale of the demonstration likelihood, beta_demo / (1 - gamma)"""
        return self.beta_demo * effective_horizon(self.gamma)

    def optimizer_settings(self) -> OptimizerSettings:
        return OptimizerSettings(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
        )


class RewardEncoder(nn.Module):
    """Maps a step (s, a, s') to the mean and log-variance of its reward"""

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        hidden: int = 64,
        reward_type: str = "state",
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__()
        if reward_type not in REWARD_TYPES:
            raise ConfigurationError(f"unknown reward_type '{reward_type}'")
        self.n_states = n_states
        self.n_actions = n_actions
        self.reward_type = reward_type
        in_dim = n_states if reward_type == "state" else 2 * n_states + n_actions
        self.mlp = Mlp(in_dim, hidden, 2, generator=generator)

    def features(self, steps: torch.Tensor) -> torch.Tensor:
        if steps.shape[-1] != 3:
            raise ShapeError(f"steps must end in (s, a, s'), got shape {tuple(steps.shape)}")
        next_states = F.one_hot(steps[..., 2], self.n_states)
        if self.reward_type == "state":
            return next_states.to(DTYPE)
        parts = [
            F.one_hot(steps[..., 0], self.n_states),
            F.one_hot(steps[..., 1], self.n_actions),
            next_states,
        ]
        return torch.cat(parts, dim=-1).to(DTYPE)

    def forward(self, steps: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out = self.mlp(self.features(steps))
        return out[..., 0], clamp_logvar(out[..., 1])


class QNetwork(nn.Module):
    def __init__(self, n_states: int, n_actions: int, hidden: int = 64, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.n_states = n_states
        self.n_actions = n_actions
        self.mlp = Mlp(n_states, hidden, n_actions, generator=generator)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.mlp(F.one_hot(states, self.n_states).to(DTYPE))


class RatingHead(nn.Module):
    """Learnable ordered cutpoints psi_1 < ... < psi_{K-1}: a base value plus softplus gaps"""

    def __init__(self, levels: int):
        super().__init__()
        if levels < 2:
            raise ConfigurationError(f"ratings need at least 2 levels, got {levels}")
        self.levels = levels
        self.base = nn.Parameter(torch.tensor(-0.25 * (levels - 2), dtype=DTYPE))
        self.raw_gaps = nn.Parameter(torch.full((levels - 2,), math.log(math.expm1(0.5)), dtype=DTYPE))

    def cutpoints(self) -> torch.Tensor:
        offsets = torch.cumsum(F.softplus(self.raw_gaps), dim=0)
        return torch.cat([self.base.reshape(1), self.base + offsets])


# Batches ---------------------------------------------------------------------

@dataclass
class SegmentBatch:
    """Segments padded to a common length; padding steps are (0, 0, 0) with mask 0"""

    steps: torch.Tensor  # [N, Lmax, 3] int64
    mask: torch.Tensor  # [N, Lmax] float64
    nominal_length: torch.Tensor  # [N] float64, the segment length parameter L

    @property
    def size(self) -> int:
        return self.steps.shape[0]


@dataclass
class PreferenceBatch:
    seg_a: SegmentBatch
    seg_b: SegmentBatch
    label: torch.Tensor  # [N] float64, 1 when seg_a is preferred


@dataclass
class DemoBatch:
    states: torch.Tensor
    actions: torch.Tensor


@dataclass
class RatingBatch:
    segments: SegmentBatch
    ratings: torch.Tensor  # [N] int64 in 1..K


@dataclass
class StopBatch:
    segments: SegmentBatch
    stop_times: torch.Tensor  # [N] int64, 1-based, 0 when censored


@dataclass
class FeedbackBatch:
    preferences: Optional[PreferenceBatch] = None
    demonstrations: Optional[DemoBatch] = None
    ratings: Optional[RatingBatch] = None
    stops: Optional[StopBatch] = None
    transitions: Optional[torch.Tensor] = None  # [N, 4] int64 (s, a, s', a')

    def is_empty(self) -> bool:
        return all(part is None for part in (self.preferences, self.demonstrations, self.ratings, self.stops))


@dataclass
class NoiseDraws:
    """Standard normal draws, one per reward query"""

    pref_a: Optional[torch.Tensor] = None
    pref_b: Optional[torch.Tensor] = None
    rating: Optional[torch.Tensor] = None


def segment_batch(segments: Sequence[Segment]) -> SegmentBatch:
    if not segments:
        raise EmptyDatasetError("cannot batch zero segments")
    longest = max(s.length for s in segments)
    steps = np.zeros((len(segments), longest, 3), dtype=np.int64)
    mask = np.zeros((len(segments), longest))
    for i, segment in enumerate(segments):
        steps[i, :segment.length] = segment.steps
        mask[i, :segment.length] = 1.0
    return SegmentBatch(
        steps=torch.from_numpy(steps),
        mask=torch.from_numpy(mask),
        nominal_length=torch.tensor([float(s.L) for s in segments], dtype=DTYPE),
    )


def make_batch(dataset: FeedbackDataset, transitions: Optional[np.ndarray] = None) -> FeedbackBatch:
    """The whole dataset as a single batch"""
    batch = FeedbackBatch()
    if dataset.preferences:
        batch.preferences = PreferenceBatch(
            seg_a=segment_batch([o.seg_a for o in dataset.preferences]),
            seg_b=segment_batch([o.seg_b for o in dataset.preferences]),
            label=torch.tensor([float(o.label) for o in dataset.preferences], dtype=DTYPE),
        )
    if dataset.demonstrations:
        steps = np.concatenate([o.trajectory.steps for o in dataset.demonstrations])
        batch.demonstrations = DemoBatch(
            states=torch.from_numpy(steps[:, 0].copy()), actions=torch.from_numpy(steps[:, 1].copy())
        )
    if dataset.ratings:
        batch.ratings = RatingBatch(
            segments=segment_batch([o.segment for o in dataset.ratings]),
            ratings=torch.tensor([o.rating for o in dataset.ratings], dtype=torch.int64),
        )
    if dataset.stops:
        batch.stops = StopBatch(
            segments=segment_batch([o.segment for o in dataset.stops]),
            stop_times=torch.tensor([o.stop_time or 0 for o in dataset.stops], dtype=torch.int64),
        )
    if transitions is None:
        transitions = extract_transitions(dataset)
    if len(transitions):
        batch.transitions = torch.from_numpy(np.asarray(transitions, dtype=np.int64))
    return batch


def _take(segments: SegmentBatch, index: torch.Tensor) -> SegmentBatch:
    steps = segments.steps[index]
    mask = segments.mask[index]
    longest = int(mask.sum(dim=1).max().item())
    return SegmentBatch(steps=steps[:, :longest], mask=mask[:, :longest], nominal_length=segments.nominal_length[index])


def sample_batch(full: FeedbackBatch, rng: np.random.Generator, batch_size: int) -> FeedbackBatch:
    """One mini-batch of up to batch_size items per present modality, drawn without replacement"""

    def pick(n: int) -> torch.Tensor:
        return torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False).astype(np.int64))

    batch = FeedbackBatch()
    if full.preferences is not None:
        index = pick(full.preferences.seg_a.size)
        batch.preferences = PreferenceBatch(
            seg_a=_take(full.preferences.seg_a, index),
            seg_b=_take(full.preferences.seg_b, index),
            label=full.preferences.label[index],
        )
    if full.demonstrations is not None:
        index = pick(len(full.demonstrations.states))
        batch.demonstrations = DemoBatch(full.demonstrations.states[index], full.demonstrations.actions[index])
    if full.ratings is not None:
        index = pick(full.ratings.segments.size)
        batch.ratings = RatingBatch(_take(full.ratings.segments, index), full.ratings.ratings[index])
    if full.stops is not None:
        index = pick(full.stops.segments.size)
        batch.stops = StopBatch(_take(full.stops.segments, index), full.stops.stop_times[index])
    if full.transitions is not None:
        batch.transitions = full.transitions[pick(len(full.transitions))]
    return batch


def draw_noise(batch: FeedbackBatch, generator: Optional[torch.Generator] = None) -> NoiseDraws:
    def normal(segments: SegmentBatch) -> torch.Tensor:
        return torch.randn(segments.mask.shape, generator=generator, dtype=DTYPE)

    noise = NoiseDraws()
    if batch.preferences is not None:
        noise.pref_a = normal(batch.preferences.seg_a)
        noise.pref_b = normal(batch.preferences.seg_b)
    if batch.ratings is not None:
        noise.rating = normal(batch.ratings.segments)
    return noise


def zero_noise(batch: FeedbackBatch) -> NoiseDraws:
    """Noise that makes every reward query return the encoder mean"""
    noise = NoiseDraws()
    if batch.preferences is not None:
        noise.pref_a = torch.zeros_like(batch.preferences.seg_a.mask)
        noise.pref_b = torch.zeros_like(batch.preferences.seg_b.mask)
    if batch.ratings is not None:
        noise.rating = torch.zeros_like(batch.ratings.segments.mask)
    return noise


# Likelihood terms --------------------------------------------------------------

# (mu, logvar, mask) of the reward queries a term made, collected for the KL penalty
Queries = List[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]


def _segment_returns(encoder: RewardEncoder, segments: SegmentBatch, eps: torch.Tensor, queries: Queries) -> torch.Tensor:
    if eps.shape != segments.mask.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} != segment shape {tuple(segments.mask.shape)}")
    mu, logvar = encoder(segments.steps)
    queries.append((mu, logvar, segments.mask))
    rewards = reparameterize(mu, logvar, eps) * segments.mask
    return rewards.sum(dim=1) / segments.nominal_length


def _preference_terms(encoder, batch: PreferenceBatch, eps_a, eps_b, beta, queries: Queries) -> torch.Tensor:
    returns_a = _segment_returns(encoder, batch.seg_a, eps_a, queries)
    returns_b = _segment_returns(encoder, batch.seg_b, eps_b, queries)
    sign = 2.0 * batch.label - 1.0
    return -F.logsigmoid(beta * (returns_a - returns_b) * sign).mean()


def preference_nll(
    encoder: RewardEncoder, batch: PreferenceBatch, eps_a: torch.Tensor, eps_b: torch.Tensor, beta: float
) -> torch.Tensor:
    """Bradley-Terry negative log-likelihood of the observed labels at sampled segment returns"""
    return _preference_terms(encoder, batch, eps_a, eps_b, beta, [])


def demo_nll(qnet: QNetwork, batch: DemoBatch, beta: float) -> torch.Tensor:
    """Mean per-step cross-entropy of the demonstrated actions under softmax(beta * Q)"""
    logits = beta * qnet(batch.states)
    return F.cross_entropy(logits, batch.actions)


def rating_probabilities(returns: torch.Tensor, cutpoints: torch.Tensor) -> torch.Tensor:
    """Ordered-logit category probabilities, shape [N, K]"""
    cdf = torch.sigmoid(cutpoints.unsqueeze(0) - returns.unsqueeze(1))
    zeros = torch.zeros_like(cdf[:, :1])
    upper = torch.cat([cdf, zeros + 1.0], dim=1)
    lower = torch.cat([zeros, cdf], dim=1)
    return upper - lower


def _rating_terms(encoder, head: RatingHead, batch: RatingBatch, eps, queries: Queries) -> torch.Tensor:
    if torch.any(batch.ratings < 1) or torch.any(batch.ratings > head.levels):
        raise ConfigurationError(f"ratings must lie in 1..{head.levels}")
    returns = _segment_returns(encoder, batch.segments, eps, queries)
    probs = rating_probabilities(returns, head.cutpoints())
    observed = probs.gather(1, (batch.ratings - 1).unsqueeze(1)).squeeze(1)
    return -torch.log(observed.clamp_min(PROBABILITY_FLOOR)).mean()


def rating_nll(encoder: RewardEncoder, head: RatingHead, batch: RatingBatch, eps: torch.Tensor) -> torch.Tensor:
    return _rating_terms(encoder, head, batch, eps, [])


def regret_decay_matrix(length: int, rho: float) -> torch.Tensor:
    """W[i, t] = rho^(t - i) for i <= t, else 0"""
    index = torch.arange(length)
    power = index.unsqueeze(0) - index.unsqueeze(1)
    decay = torch.pow(torch.tensor(rho, dtype=DTYPE), power.clamp_min(0).to(DTYPE))
    return torch.where(power >= 0, decay, torch.zeros_like(decay))


def segment_cumulative_regret(qnet: QNetwork, segments: SegmentBatch, rho: float) -> torch.Tensor:
    q = qnet(segments.steps[..., 0])
    taken = q.gather(-1, segments.steps[..., 1:2]).squeeze(-1)
    regret = (q.max(dim=-1).values - taken).clamp_min(0.0) * segments.mask
    return regret @ regret_decay_matrix(segments.mask.shape[1], rho)


def stop_log_likelihood(cum_regret: torch.Tensor, mask: torch.Tensor, stop_times: torch.Tensor, lam: float) -> torch.Tensor:
    """Per-segment log-probability of the observed stop time (0 = censored) under the regret hazard"""
    t = torch.arange(cum_regret.shape[1]).unsqueeze(0)
    stopped = stop_times > 0
    survived = torch.where(stopped.unsqueeze(1), t < (stop_times - 1).unsqueeze(1), mask > 0)
    log_survival = -lam * (cum_regret * survived.to(DTYPE) * mask).sum(dim=1)
    at_stop = cum_regret.gather(1, (stop_times - 1).clamp_min(0).unsqueeze(1)).squeeze(1)
    log_hazard = torch.log((-torch.expm1(-lam * at_stop)).clamp_min(PROBABILITY_FLOOR))
    return log_survival + torch.where(stopped, log_hazard, torch.zeros_like(log_hazard))


def stop_nll(qnet: QNetwork, batch: StopBatch, lam: float, rho: float) -> torch.Tensor:
    lengths = batch.segments.mask.sum(dim=1).to(torch.int64)
    if torch.any(batch.stop_times > lengths) or torch.any(batch.stop_times < 0):
        raise ConfigurationError("stop times must lie within their segments")
    cum = segment_cumulative_regret(qnet, batch.segments, rho)
    return -stop_log_likelihood(cum, batch.segments.mask, batch.stop_times, lam).mean()


def kl_term(mu: torch.Tensor, logvar: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean KL(N(mu, sigma^2) || N(0, 1)) over the (masked) entries"""
    kl = 0.5 * (torch.exp(logvar) + mu ** 2 - 1.0 - logvar)
    if mask is None:
        return kl.mean()
    return (kl * mask).sum() / mask.sum()


def _td_terms(encoder, qnet, transitions: torch.Tensor, gamma: float, queries: Queries) -> torch.Tensor:
    if transitions.dim() != 2 or transitions.shape[1] != 4:
        raise ShapeError(f"transitions must have shape [N, 4], got {tuple(transitions.shape)}")
    s, a, s_next, a_next = transitions.unbind(dim=1)
    if torch.any(a_next < NEXT_TERMINAL):
        raise ShapeError(f"unknown next-action marker {a_next.min().item()}")
    q_taken = qnet(s).gather(1, a.unsqueeze(1)).squeeze(1)
    next_values = qnet(s_next)
    q_next = next_values.gather(1, a_next.clamp_min(0).unsqueeze(1)).squeeze(1)
    q_next = torch.where(a_next == NEXT_GREEDY, next_values.max(dim=1).values, q_next)
    q_next = torch.where(a_next == NEXT_TERMINAL, torch.zeros_like(q_next), q_next)
    delta = q_taken - gamma * q_next
    mu, logvar = encoder(transitions[:, :3])
    queries.append((mu, logvar, torch.ones_like(mu)))
    nll = HALF_LOG_2PI + 0.5 * logvar + (delta - mu) ** 2 / (2.0 * torch.exp(logvar))
    return nll.mean()


def td_loss(encoder: RewardEncoder, qnet: QNetwork, transitions: torch.Tensor, gamma: float) -> torch.Tensor:
    """Gaussian NLL of the Bellman difference Q(s,a) - gamma Q(s',a') under the encoder's reward.

    Rows marked NEXT_GREEDY bootstrap from max_b Q(s', b); NEXT_TERMINAL rows use Q(s') = 0.
    """
    return _td_terms(encoder, qnet, transitions, gamma, [])


@dataclass
class LossBreakdown:
    preference: torch.Tensor
    demonstration: torch.Tensor
    rating: torch.Tensor
    stop: torch.Tensor
    kl: torch.Tensor
    td: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).item()) for name in LOSS_TERMS + ("total",)}


def total_loss(model: "MavrlModel", batch: FeedbackBatch, config: TrainConfig, noise: NoiseDraws) -> LossBreakdown:
    """Sum of the modality NLLs plus lambda_kl * KL plus lambda_td * TD; absent modalities add 0"""
    if batch.is_empty():
        raise EmptyDatasetError("every feedback modality is empty")
    zero = torch.zeros((), dtype=DTYPE)
    queries: Queries = []
    terms = dict.fromkeys(LOSS_TERMS, zero)

    if batch.preferences is not None:
        terms["preference"] = _preference_terms(
            model.encoder, batch.preferences, noise.pref_a, noise.pref_b, config.beta_pref, queries
        )
    if batch.demonstrations is not None:
        terms["demonstration"] = demo_nll(model.qnet, batch.demonstrations, config.demo_logit_scale)
    if batch.ratings is not None:
        if model.rating_head is None:
            raise ConfigurationError("rating feedback needs a model built with rating levels")
        terms["rating"] = _rating_terms(model.encoder, model.rating_head, batch.ratings, noise.rating, queries)
    if batch.stops is not None:
        terms["stop"] = stop_nll(model.qnet, batch.stops, config.stop_lambda, config.stop_rho)
    if batch.transitions is not None and len(batch.transitions):
        terms["td"] = _td_terms(model.encoder, model.qnet, batch.transitions, config.gamma, queries)
    if queries:
        mu = torch.cat([q[0].reshape(-1) for q in queries])
        logvar = torch.cat([q[1].reshape(-1) for q in queries])
        mask = torch.cat([q[2].reshape(-1) for q in queries])
        terms["kl"] = kl_term(mu, logvar, mask)

    total = (
        terms["preference"] + terms["demonstration"] + terms["rating"] + terms["stop"]
        + config.lambda_kl * terms["kl"] + config.lambda_td * terms["td"]
    )
    return LossBreakdown(total=total, **terms)


# Model and training loop --------------------------------------------------------

class MavrlModel:
    """Encoder, Q-network and (when ratings are used) the rating cutpoints, plus the loss curve"""

    def __init__(
        self,
        n_states: int,
        n_actions: int,
        config: TrainConfig,
        rating_levels: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
    ):
        self.n_states = n_states
        self.n_actions = n_actions
        self.config = config
        self.rating_levels = rating_levels
        self.encoder = RewardEncoder(n_states, n_actions, config.hidden, config.reward_type, generator)
        self.qnet = QNetwork(n_states, n_actions, config.hidden, generator)
        self.rating_head = RatingHead(rating_levels) if rating_levels is not None else None
        self.loss_curve = pd.DataFrame(columns=list(CURVE_COLUMNS))

    def modules(self) -> Dict[str, nn.Module]:
        parts = {"encoder": self.encoder, "qnet": self.qnet}
        if self.rating_head is not None:
            parts["rating_head"] = self.rating_head
        return parts

    def parameters(self) -> List[torch.Tensor]:
        return [p for module in self.modules().values() for p in module.parameters()]

    def named_tensors(self) -> Dict[str, torch.Tensor]:
        return {
            f"{prefix}.{name}": tensor
            for prefix, module in self.modules().items()
            for name, tensor in module.state_dict().items()
        }

    def check_cutpoints(self) -> None:
        if self.rating_head is None:
            return
        cutpoints = self.rating_head.cutpoints().detach()
        if not torch.all(torch.diff(cutpoints) > 0):
            raise NumericError(f"rating cutpoints are no longer increasing: {cutpoints.tolist()}")

    def save(self, directory: str) -> str:
        """Write checkpoint.txt and loss_curve.csv into directory; returns the checkpoint path"""
        os.makedirs(directory, exist_ok=True)
        metadata = {
            "n_states": str(self.n_states),
            "n_actions": str(self.n_actions),
            "rating_levels": "-" if self.rating_levels is None else str(self.rating_levels),
            "config": json.dumps(dataclasses.asdict(self.config), sort_keys=True),
        }
        path = os.path.join(directory, CHECKPOINT_FILE)
        save_checkpoint(self.named_tensors(), path, metadata)
        write_csv_atomic(self.loss_curve, os.path.join(directory, LOSS_CURVE_FILE))
        return path

    @classmethod
    def load(cls, path: str) -> "MavrlModel":
        tensors, metadata = load_checkpoint(path)
        try:
            config = TrainConfig(**json.loads(metadata["config"]))
            levels = None if metadata["rating_levels"] == "-" else int(metadata["rating_levels"])
            model = cls(int(metadata["n_states"]), int(metadata["n_actions"]), config, levels)
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"{path}: incomplete checkpoint metadata ({e})") from e

        for prefix, module in model.modules().items():
            state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            try:
                module.load_state_dict(state)
            except RuntimeError as e:
                raise ShapeError(f"{path}: {prefix} tensors do not match the model ({e})") from e

        curve_path = os.path.join(os.path.dirname(path), LOSS_CURVE_FILE)
        if os.path.exists(curve_path):
            model.loss_curve = read_csv_exact(curve_path)
        return model


def smoothed_loss(curve: pd.DataFrame, window: int = 100, column: str = "total") -> pd.Series:
    return curve[column].rolling(window, min_periods=1).mean()


def train(
    dataset: FeedbackDataset,
    config: TrainConfig,
    callback: Optional[Callable[[int, LossBreakdown], None]] = None,
    mdp: Optional[TabularMdp] = None,
) -> MavrlModel:
    """Joint training of encoder, Q-network and cutpoints on every present modality.

    Without an MDP the TD term runs on the transitions extracted from the
    feedback. With one, it runs on the Bellman rows of every state-action
    (bellman_transitions), all of them at every step.
    """
    if dataset.is_empty():
        raise EmptyDatasetError("training needs at least one non-empty feedback modality")
    if mdp is not None and (mdp.n_states, mdp.n_actions) != (dataset.n_states, dataset.n_actions):
        raise ShapeError(
            f"dataset is {dataset.n_states}x{dataset.n_actions} but {mdp.name} is {mdp.n_states}x{mdp.n_actions}"
        )

    generator = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    levels = dataset.rating_levels if dataset.ratings else None
    model = MavrlModel(dataset.n_states, dataset.n_actions, config, levels, generator)
    optimizer = ClippedAdamW(model.parameters(), config.optimizer_settings())
    full = make_batch(dataset, None if mdp is None else bellman_transitions(mdp))

    logging.info(
        f"Training on {dataset.present_modalities()} feedback {dataset.counts()} with "
        f"{0 if full.transitions is None else len(full.transitions)} TD transitions for {config.steps} steps"
    )
    curve = np.zeros((config.steps, len(CURVE_COLUMNS)))
    for step in tqdm(range(config.steps), disable=not config.progress, desc="train"):
        batch = sample_batch(full, rng, config.batch_size)
        if mdp is not None:
            batch.transitions = full.transitions
        losses = total_loss(model, batch, config, draw_noise(batch, generator))
        values = losses.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise DivergenceError(f"loss diverged at step {step}: {values}")

        grads = backward(losses.total, model.parameters())
        optimizer.step(grads)
        model.check_cutpoints()

        curve[step] = [step] + [values[name] for name in CURVE_COLUMNS[1:]]
        if callback is not None:
            callback(step, losses)
        if config.log_every and (step + 1) % config.log_every == 0:
            logging.info(
                f"step {step + 1}/{config.steps}: total {values['total']:.4f} "
                + " ".join(f"{name} {values[name]:.4f}" for name in LOSS_TERMS)
            )

    model.loss_curve = pd.DataFrame(curve, columns=list(CURVE_COLUMNS)).astype({"step": np.int64})
    return model
