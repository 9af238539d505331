#!/usr/bin/env python3
"""
Tests for the feedback likelihoods, the combined objective and the training loop
"""

import math
import time

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

import mavrl
from errors import ConfigurationError, DivergenceError, EmptyDatasetError, ShapeError
from evaluation import extract_inferred_reward, plan_on_inferred
from feedback import (
    NEXT_GREEDY,
    NEXT_TERMINAL,
    DemoObs,
    FeedbackDataset,
    PreferenceObs,
    RatingObs,
    Segment,
    StopObs,
    SimulatorParams,
    bellman_transitions,
    collect_trajectories,
    sample_segments,
    simulate_demonstrations,
    simulate_preferences,
    simulate_ratings,
    simulate_stops,
)
from mavrl import (
    CURVE_COLUMNS,
    DemoBatch,
    FeedbackBatch,
    LossBreakdown,
    MavrlModel,
    PreferenceBatch,
    QNetwork,
    RatingBatch,
    RatingHead,
    RewardEncoder,
    StopBatch,
    TrainConfig,
    demo_nll,
    draw_noise,
    kl_term,
    make_batch,
    preference_nll,
    rating_nll,
    rating_probabilities,
    sample_batch,
    segment_batch,
    stop_log_likelihood,
    stop_nll,
    td_loss,
    total_loss,
    train,
    zero_noise,
)
from mdp import build_grid_env, rollout, value_iteration
from networks import DTYPE, backward

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class TableEncoder(nn.Module):
    """Reward encoder with one free (mu, logvar) pair per entered state"""

    reward_type = "state"

    def __init__(self, mu, logvar=None):
        super().__init__()
        self.mu = nn.Parameter(torch.tensor(mu, dtype=DTYPE))
        self.logvar = nn.Parameter(torch.zeros(len(mu), dtype=DTYPE) if logvar is None else torch.tensor(logvar, dtype=DTYPE))

    def forward(self, steps):
        index = steps[..., 2]
        return self.mu[index], self.logvar[index]


class TableQ(nn.Module):
    def __init__(self, values):
        super().__init__()
        self.values = nn.Parameter(torch.tensor(values, dtype=DTYPE))

    def forward(self, states):
        return self.values[states]


def seg(steps, L=None, source="t", start=0):
    steps = np.array(steps)
    return Segment(steps=steps, source_traj=source, start_index=start, L=L or len(steps))


def scalar(value):
    return torch.tensor(value, dtype=DTYPE)


# preferences

def test_identical_segments_cost_log_two():
    encoder = RewardEncoder(9, 5, hidden=8, generator=torch.Generator().manual_seed(0))
    a = seg([[0, 3, 1], [1, 1, 4]])
    batch = PreferenceBatch(segment_batch([a]), segment_batch([a]), torch.ones(1, dtype=DTYPE))
    zeros = torch.zeros(1, 2, dtype=DTYPE)
    assert preference_nll(encoder, batch, zeros, zeros, 5.0).item() == pytest.approx(math.log(2.0), abs=1e-15)


def test_preference_nll_hand_computed():
    encoder = TableEncoder([0.0, 0.3, -0.2, 0.5], [0.0, math.log(0.25), 0.0, math.log(0.25)])
    a = seg([[0, 0, 1], [1, 0, 3]], L=2)
    b = seg([[0, 0, 2]], L=2)
    batch = PreferenceBatch(segment_batch([a]), segment_batch([b]), torch.ones(1, dtype=DTYPE))
    eps_a = torch.tensor([[1.0, -2.0]], dtype=DTYPE)
    eps_b = torch.tensor([[0.5]], dtype=DTYPE)
    # return_a = (0.3 + 0.5 * 1 + 0.5 + 0.5 * -2) / 2 = 0.15, return_b = (-0.2 + 1 * 0.5) / 2 = 0.15
    return_a = (0.3 + 0.5 * 1.0 + 0.5 + 0.5 * -2.0) / 2
    return_b = (-0.2 + 1.0 * 0.5) / 2
    expected = math.log1p(math.exp(-5.0 * (return_a - return_b)))
    assert preference_nll(encoder, batch, eps_a, eps_b, 5.0).item() == pytest.approx(expected, abs=1e-10)

    flipped = PreferenceBatch(batch.seg_a, batch.seg_b, torch.zeros(1, dtype=DTYPE))
    expected_flipped = math.log1p(math.exp(5.0 * (return_a - return_b)))
    assert preference_nll(encoder, flipped, eps_a, eps_b, 5.0).item() == pytest.approx(expected_flipped, abs=1e-10)


def test_preference_saturates():
    encoder = TableEncoder([0.0, 50.0, -50.0])
    batch = PreferenceBatch(
        segment_batch([seg([[0, 0, 1]])]), segment_batch([seg([[0, 0, 2]])]), torch.ones(1, dtype=DTYPE)
    )
    zeros = torch.zeros(1, 1, dtype=DTYPE)
    assert preference_nll(encoder, batch, zeros, zeros, 5.0).item() < 1e-12


# demonstrations

def test_demo_nll_uniform_and_closed_form():
    uniform = TableQ(np.zeros((3, 5)))
    batch = DemoBatch(states=torch.tensor([0, 1, 2]), actions=torch.tensor([4, 0, 2]))
    assert demo_nll(uniform, batch, 10.0).item() == pytest.approx(math.log(5.0), abs=1e-14)

    two = TableQ([[1.0, 0.0]])
    single = DemoBatch(states=torch.tensor([0]), actions=torch.tensor([0]))
    assert demo_nll(two, single, 1.0).item() == pytest.approx(0.31326, abs=1e-5)

    confident = TableQ([[100.0, 0.0]])
    assert demo_nll(confident, single, 1.0).item() < 1e-30


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.integers(-64, 64), min_size=12, max_size=12),
    st.lists(st.integers(-50, 50), min_size=3, max_size=3),
    st.sampled_from([1.0, 2.0, 10.0]),
)
def test_demo_nll_invariant_to_state_shifts(values, shifts, beta):
    q = np.array(values, dtype=np.float64).reshape(3, 4) / 8.0
    shifted = q + np.array(shifts, dtype=np.float64)[:, None]
    batch = DemoBatch(states=torch.tensor([0, 1, 2, 1]), actions=torch.tensor([3, 0, 1, 2]))
    assert demo_nll(TableQ(q), batch, beta).item() == demo_nll(TableQ(shifted), batch, beta).item()


# ratings

def test_rating_probability_closed_form():
    probs = rating_probabilities(scalar([0.5]), scalar([0.0, 1.0]))
    # sigmoid(0.5) - sigmoid(-0.5)
    assert probs[0, 1].item() == pytest.approx(0.24492, abs=1e-5)
    low = rating_probabilities(scalar([-1e3]), scalar([0.0, 1.0]))
    assert low[0, 0].item() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(min_value=-20, max_value=20),
    st.floats(min_value=-5, max_value=5),
    st.lists(st.floats(min_value=1e-3, max_value=3.0), min_size=1, max_size=8),
)
def test_rating_probabilities_sum_to_one(ret, base, gaps):
    cutpoints = base + np.concatenate([[0.0], np.cumsum(gaps)])
    probs = rating_probabilities(scalar([ret]), scalar(cutpoints))
    assert probs.shape == (1, len(cutpoints) + 1)
    assert abs(probs.sum().item() - 1.0) <= 1e-12
    assert torch.all(probs >= 0)


def test_rating_head_initial_cutpoints():
    head = RatingHead(5)
    torch.testing.assert_close(head.cutpoints().detach(), scalar([-0.75, -0.25, 0.25, 0.75]), rtol=0, atol=1e-15)
    assert RatingHead(2).cutpoints().shape == (1,)
    with pytest.raises(ConfigurationError):
        RatingHead(1)


def test_rating_nll_matches_probability():
    encoder = TableEncoder([0.0, 1.0, 0.0])
    head = RatingHead(3)
    segments = segment_batch([seg([[0, 0, 1], [1, 0, 2]], L=2)])
    batch = RatingBatch(segments, torch.tensor([2]))
    cutpoints = head.cutpoints().detach()
    probs = rating_probabilities(scalar([0.5]), cutpoints)
    expected = -math.log(probs[0, 1].item())
    assert rating_nll(encoder, head, batch, torch.zeros(1, 2, dtype=DTYPE)).item() == pytest.approx(expected, abs=1e-12)

    with pytest.raises(ConfigurationError):
        rating_nll(encoder, head, RatingBatch(segments, torch.tensor([4])), torch.zeros(1, 2, dtype=DTYPE))


# stops

def test_stop_nll_closed_form():
    # regret (0, 1, 0): action 0 is optimal with Q = (1, 0) everywhere
    qnet = TableQ(np.tile([1.0, 0.0], (4, 1)))
    segments = segment_batch([seg([[0, 0, 1], [1, 1, 2], [2, 0, 3]])])
    stopped = StopBatch(segments, torch.tensor([2]))
    assert stop_nll(qnet, stopped, 1.0, 0.1).item() == pytest.approx(0.45868, abs=1e-5)

    censored = StopBatch(segments, torch.tensor([0]))
    # survival through cumulative regret (0, 1, 0.1)
    assert stop_nll(qnet, censored, 1.0, 0.1).item() == pytest.approx(1.1, abs=1e-12)


def test_stop_nll_without_regret():
    qnet = TableQ(np.zeros((4, 2)))
    segments = segment_batch([seg([[0, 0, 1], [1, 1, 2]])])
    assert stop_nll(qnet, StopBatch(segments, torch.tensor([0])), 1.0, 0.1).item() == 0.0
    impossible = stop_nll(qnet, StopBatch(segments, torch.tensor([1])), 1.0, 0.1).item()
    assert impossible == pytest.approx(-math.log(1e-12))
    with pytest.raises(ConfigurationError):
        stop_nll(qnet, StopBatch(segments, torch.tensor([3])), 1.0, 0.1)


@pytest.mark.parametrize("seed", range(5))
def test_stop_outcomes_form_a_distribution(seed):
    rng = np.random.default_rng(seed)
    L = 10
    cum = scalar(np.cumsum(rng.random(L)))[None, :]
    mask = torch.ones(1, L, dtype=DTYPE)
    lam = float(rng.uniform(0.05, 2.0))
    total = 0.0
    for stop_time in range(L + 1):
        total += math.exp(stop_log_likelihood(cum, mask, torch.tensor([stop_time]), lam).item())
    assert total == pytest.approx(1.0, abs=1e-9)


# KL and TD

def test_kl_term_values():
    assert kl_term(scalar([0.0]), scalar([0.0])).item() == 0.0
    assert kl_term(scalar([2.0]), scalar([0.0])).item() == pytest.approx(2.0)
    assert kl_term(scalar([0.5]), scalar([math.log(0.25)])).item() == pytest.approx(0.44315, abs=1e-5)
    masked = kl_term(scalar([2.0, 0.0]), scalar([0.0, 0.0]), scalar([1.0, 0.0]))
    assert masked.item() == pytest.approx(2.0)


def test_td_loss_values():
    qnet = TableQ([[0.7, -0.2], [0.1, 0.4]])
    encoder = TableEncoder([0.0, 0.7])
    # gamma 0, mean equal to Q(s, a): density at the mean
    at_mean = torch.tensor([[0, 0, 1, 1]])
    assert td_loss(encoder, qnet, at_mean, 0.0).item() == pytest.approx(HALF_LOG_2PI, abs=1e-14)

    qnet = TableQ([[1.0, 0.0], [0.0, 0.0]])
    one_off = torch.tensor([[0, 0, 0, 1]])
    assert td_loss(TableEncoder([0.0, 0.0]), qnet, one_off, 0.5).item() == pytest.approx(HALF_LOG_2PI + 0.5, abs=1e-14)


def test_td_loss_is_minimal_at_the_bellman_difference():
    qnet = TableQ([[0.6, 0.2], [0.3, -0.1]])
    transitions = torch.tensor([[0, 0, 1, 1]])
    delta = 0.6 - 0.9 * -0.1
    best = td_loss(TableEncoder([0.0, delta]), qnet, transitions, 0.9).item()
    for offset in (-0.1, -1e-3, 1e-3, 0.1):
        assert td_loss(TableEncoder([0.0, delta + offset]), qnet, transitions, 0.9).item() > best


def test_td_loss_next_action_markers():
    qnet = TableQ([[0.5, 0.1], [0.3, 0.8], [0.9, 0.2]])
    # greedy row: 0.5 - 0.9 * max(0.3, 0.8); terminal row: 0.1 - 0.9 * 0
    encoder = TableEncoder([0.0, 0.5 - 0.9 * 0.8, 0.1])
    rows = torch.tensor([[0, 0, 1, NEXT_GREEDY], [0, 1, 2, NEXT_TERMINAL]])
    assert td_loss(encoder, qnet, rows, 0.9).item() == pytest.approx(HALF_LOG_2PI, abs=1e-12)

    explicit = torch.tensor([[0, 0, 1, 1]])
    assert td_loss(encoder, qnet, rows[:1], 0.9).item() == td_loss(encoder, qnet, explicit, 0.9).item()

    with pytest.raises(ShapeError):
        td_loss(encoder, qnet, torch.tensor([[0, 0, 1, NEXT_TERMINAL - 1]]), 0.9)


# combined objective

def tiny_model(n_states=9, n_actions=5, levels=3, seed=0, **overrides):
    config = TrainConfig(hidden=8, **overrides)
    return MavrlModel(n_states, n_actions, config, levels, torch.Generator().manual_seed(seed))


def tiny_dataset():
    a = seg([[0, 3, 1], [1, 1, 4]], source="pool-0", start=0)
    b = seg([[3, 3, 4], [4, 3, 5]], source="pool-1", start=0)
    demo = DemoObs(rollout_steps([[0, 1, 3], [3, 3, 4], [4, 1, 7]]))
    return FeedbackDataset(
        n_states=9,
        n_actions=5,
        preferences=[PreferenceObs(a, b, 1)],
        demonstrations=[demo],
        ratings=[RatingObs(b, 2)],
        stops=[StopObs(a, 2)],
        rating_levels=3,
    )


def rollout_steps(steps):
    from mdp import Trajectory

    return Trajectory(steps=np.array(steps), traj_id="demo-0")


def test_total_loss_is_the_sum_of_its_terms():
    model = tiny_model()
    config = model.config
    dataset = tiny_dataset()
    batch = make_batch(dataset)
    noise = draw_noise(batch, torch.Generator().manual_seed(1))
    losses = total_loss(model, batch, config, noise)

    queries = []
    pref = mavrl._preference_terms(model.encoder, batch.preferences, noise.pref_a, noise.pref_b, config.beta_pref, queries)
    demo = demo_nll(model.qnet, batch.demonstrations, config.demo_logit_scale)
    rating = mavrl._rating_terms(model.encoder, model.rating_head, batch.ratings, noise.rating, queries)
    stop = stop_nll(model.qnet, batch.stops, config.stop_lambda, config.stop_rho)
    td = mavrl._td_terms(model.encoder, model.qnet, batch.transitions, config.gamma, queries)
    kl = kl_term(
        torch.cat([q[0].reshape(-1) for q in queries]),
        torch.cat([q[1].reshape(-1) for q in queries]),
        torch.cat([q[2].reshape(-1) for q in queries]),
    )
    expected = pref + demo + rating + stop + config.lambda_kl * kl + config.lambda_td * td
    assert losses.total.item() == pytest.approx(expected.item(), abs=1e-12)
    assert losses.preference.item() == pref.item()
    assert set(losses.as_floats()) == set(CURVE_COLUMNS[1:])


def test_demo_only_objective_is_the_demo_nll():
    model = tiny_model(lambda_kl=0.0, lambda_td=0.0)
    dataset = tiny_dataset().restricted_to("D")
    batch = make_batch(dataset)
    losses = total_loss(model, batch, model.config, zero_noise(batch))
    assert losses.total.item() == demo_nll(model.qnet, batch.demonstrations, model.config.demo_logit_scale).item()


def test_removing_a_modality_removes_exactly_its_term():
    model = tiny_model(lambda_kl=0.0)
    dataset = tiny_dataset()
    full = make_batch(dataset)
    noise = draw_noise(full, torch.Generator().manual_seed(3))
    with_all = total_loss(model, full, model.config, noise)

    without = make_batch(dataset.restricted_to("DRS"), transitions=full.transitions.numpy())
    losses = total_loss(model, without, model.config, noise)
    assert with_all.total.item() - losses.total.item() == pytest.approx(with_all.preference.item(), abs=1e-12)


def test_kl_vanishes_for_an_encoder_at_the_prior():
    model = tiny_model()
    model.encoder = TableEncoder(np.zeros(9).tolist())
    batch = make_batch(tiny_dataset())
    losses = total_loss(model, batch, model.config, draw_noise(batch, torch.Generator().manual_seed(0)))
    assert losses.kl.item() == 0.0


def test_empty_batch_is_rejected():
    model = tiny_model()
    with pytest.raises(EmptyDatasetError):
        total_loss(model, FeedbackBatch(), model.config, mavrl.NoiseDraws())


def test_sample_batch_sizes():
    dataset = tiny_dataset()
    full = make_batch(dataset)
    batch = sample_batch(full, np.random.default_rng(0), 2)
    assert batch.preferences.seg_a.size == 1
    assert len(batch.demonstrations.states) == 2
    assert len(batch.transitions) == 2
    assert batch.stops.segments.mask.sum().item() == 2.0


# finite-difference gradient suite

def finite_difference_check(loss_fn, params, h=1e-5, per_tensor=5):
    grads = backward(loss_fn(), params)
    with torch.no_grad():
        for param, grad in zip(params, grads):
            flat, flat_grad = param.view(-1), grad.reshape(-1)
            for i in range(0, flat.numel(), max(1, flat.numel() // per_tensor)):
                original = flat[i].item()
                flat[i] = original + h
                up = loss_fn().item()
                flat[i] = original - h
                down = loss_fn().item()
                flat[i] = original
                numeric = (up - down) / (2 * h)
                assert abs(numeric - flat_grad[i].item()) <= 1e-4 * max(abs(numeric), 1e-3), (numeric, flat_grad[i].item())


@pytest.mark.parametrize("term", ["preference", "demonstration", "rating", "stop", "kl", "td"])
def test_gradients_match_finite_differences(term):
    dataset = tiny_dataset()
    batch = make_batch(dataset)
    for seed in range(10):
        model = tiny_model(seed=seed, stop_lambda=0.7)
        # move the cutpoints off their symmetric start
        with torch.no_grad():
            model.rating_head.raw_gaps.add_(0.1 * seed)
        noise = draw_noise(batch, torch.Generator().manual_seed(seed))
        config = model.config
        losses = {
            "preference": lambda: preference_nll(model.encoder, batch.preferences, noise.pref_a, noise.pref_b, config.beta_pref),
            "demonstration": lambda: demo_nll(model.qnet, batch.demonstrations, config.beta_demo),
            "rating": lambda: rating_nll(model.encoder, model.rating_head, batch.ratings, noise.rating),
            "stop": lambda: stop_nll(model.qnet, batch.stops, config.stop_lambda, config.stop_rho),
            "kl": lambda: kl_term(*model.encoder(batch.preferences.seg_a.steps)),
            "td": lambda: td_loss(model.encoder, model.qnet, batch.transitions, config.gamma),
        }
        finite_difference_check(losses[term], model.parameters())


# training

@pytest.fixture(scope="module")
def sparse_dataset():
    mdp = build_grid_env("sparse", size=3)
    q = value_iteration(mdp)
    rng = np.random.default_rng(0)
    pool = collect_trajectories(mdp, q, 0.0, 20, 30, rng)
    params = SimulatorParams(L=4, K=3)
    dataset = FeedbackDataset(mdp.n_states, mdp.n_actions, trajectories={t.traj_id: t for t in pool}, rating_levels=3)
    dataset.preferences = simulate_preferences(sample_segments(pool, 4, 12, rng), mdp.reward, 5.0, 6, rng)
    dataset.demonstrations = simulate_demonstrations(mdp, q, 10.0, 2, 30, rng)
    dataset.ratings, _ = simulate_ratings(sample_segments(pool, 4, 6, rng), mdp.reward, 3)
    dataset.stops = simulate_stops(sample_segments(pool, 4, 6, rng), q, params, rng, lam=1.0)
    return mdp, dataset


def small_config(**overrides):
    values = dict(steps=25, batch_size=4, hidden=8, log_every=10, seed=3)
    values.update(overrides)
    return TrainConfig(**values)


def test_training_is_deterministic(sparse_dataset):
    _, dataset = sparse_dataset
    first = train(dataset, small_config())
    second = train(dataset, small_config())
    for (name, a), b in zip(first.named_tensors().items(), second.named_tensors().values()):
        assert torch.equal(a, b), name
    assert first.loss_curve.equals(second.loss_curve)

    other = train(dataset, small_config(seed=4))
    assert not torch.equal(first.encoder.mlp.net[0].weight, other.encoder.mlp.net[0].weight)


def test_training_records_every_step(sparse_dataset):
    _, dataset = sparse_dataset
    steps = []
    model = train(dataset, small_config(), callback=lambda step, losses: steps.append(step))
    assert steps == list(range(25))
    curve = model.loss_curve
    assert list(curve.columns) == list(CURVE_COLUMNS)
    assert list(curve["step"]) == list(range(25))
    assert np.all(np.isfinite(curve.drop(columns="step").to_numpy()))
    assert np.all(np.diff(model.rating_head.cutpoints().detach().numpy()) > 0)
    assert len(mavrl.smoothed_loss(curve, window=5)) == 25


def test_model_save_and_load(sparse_dataset, tmp_path):
    mdp, dataset = sparse_dataset
    model = train(dataset, small_config(reward_type="state_action"))
    path = model.save(str(tmp_path))
    loaded = MavrlModel.load(path)
    assert loaded.config == model.config
    assert loaded.rating_levels == 3
    for (name, a), b in zip(model.named_tensors().items(), loaded.named_tensors().values()):
        assert torch.equal(a, b), name
    before = extract_inferred_reward(model.encoder, mdp)
    after = extract_inferred_reward(loaded.encoder, mdp)
    assert before.mean.shape == (mdp.n_states, mdp.n_actions)
    np.testing.assert_array_equal(before.mean, after.mean)
    np.testing.assert_array_equal(before.variance, after.variance)
    assert loaded.loss_curve.equals(model.loss_curve)


def test_bellman_rows_cover_every_non_terminal_state_action():
    mdp = build_grid_env("sparse", size=3)
    rows = bellman_transitions(mdp)
    assert rows.shape == (8 * 5, 4)
    assert not np.any(mdp.terminal[rows[:, 0]])
    entering_goal = rows[rows[:, 2] == 8]
    # down from 5 and right from 7
    assert sorted(map(tuple, entering_goal[:, :2])) == [(5, 1), (7, 3)]
    assert np.all(entering_goal[:, 3] == NEXT_TERMINAL)
    assert np.all(rows[rows[:, 2] != 8][:, 3] == NEXT_GREEDY)


def test_training_with_a_known_mdp_uses_every_bellman_row(sparse_dataset, monkeypatch):
    mdp, dataset = sparse_dataset
    sizes = []
    real_loss = mavrl.total_loss

    def recording(model, batch, config, noise):
        sizes.append(len(batch.transitions))
        return real_loss(model, batch, config, noise)

    monkeypatch.setattr(mavrl, "total_loss", recording)
    train(dataset, small_config(steps=5), mdp=mdp)
    assert sizes == [40] * 5


def test_training_rejects_a_mismatched_mdp(sparse_dataset):
    _, dataset = sparse_dataset
    with pytest.raises(ShapeError):
        train(dataset, small_config(), mdp=build_grid_env("sparse", size=4))


def test_training_needs_feedback():
    with pytest.raises(EmptyDatasetError):
        train(FeedbackDataset(n_states=4, n_actions=2), small_config())


def test_divergence_aborts_training(sparse_dataset, monkeypatch):
    _, dataset = sparse_dataset
    nan = torch.tensor(float("nan"), dtype=DTYPE)

    def diverged(model, batch, config, noise):
        return LossBreakdown(nan, nan, nan, nan, nan, nan, nan)

    monkeypatch.setattr(mavrl, "total_loss", diverged)
    with pytest.raises(DivergenceError):
        train(dataset, small_config())


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lambda_kl=-1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(reward_type="trajectory")


@pytest.mark.slow
def test_demonstrations_alone_recover_the_goal():
    mdp = build_grid_env("sparse", size=3)
    q = value_iteration(mdp)
    started = time.perf_counter()
    for seed in range(10):
        rng = np.random.default_rng(seed)
        demos = simulate_demonstrations(mdp, q, 10.0, 5, 30, rng)
        dataset = FeedbackDataset(mdp.n_states, mdp.n_actions, demonstrations=demos)
        model = train(dataset, TrainConfig(steps=1000, seed=seed, log_every=0), mdp=mdp)
        policy = plan_on_inferred(mdp, extract_inferred_reward(model.encoder, mdp))
        traj = rollout(mdp, policy, 20, np.random.default_rng(seed))
        assert traj.next_states[-1] == 8, f"seed {seed} did not reach the goal"
    assert time.perf_counter() - started < 30.0


if __name__ == '__main__':
    pytest.main([__file__, "-v"])
