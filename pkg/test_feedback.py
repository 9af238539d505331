#!/usr/bin/env python3
"""
Tests for the feedback simulators and the dataset text format
"""

import numpy as np
import pytest

from errors import ConfigurationError, EmptyDatasetError, ShapeError
from feedback import (
    FeedbackDataset,
    PreferenceObs,
    RatingObs,
    Segment,
    SimulatorParams,
    StopObs,
    DemoObs,
    assign_ratings,
    calibrate_stop_sensitivity,
    collect_trajectories,
    cumulative_regret,
    extract_transitions,
    instantaneous_regret,
    load_dataset,
    normalized_return,
    preference_probability,
    sample_segments,
    save_dataset,
    simulate_demonstrations,
    simulate_preferences,
    simulate_ratings,
    simulate_stops,
    stop_hazards,
)
from mdp import QTable, Trajectory, build_grid_env, discounted_return, rollout, uniform_policy, value_iteration


@pytest.fixture(scope="module")
def trap():
    mdp = build_grid_env("trap", size=6)
    return mdp, value_iteration(mdp)


def test_segment_validation():
    with pytest.raises(ShapeError):
        Segment(steps=np.zeros((0, 3)), source_traj="t", start_index=0, L=3)
    with pytest.raises(ShapeError):
        Segment(steps=np.array([[0, 1, 3], [0, 1, 3], [3, 1, 6], [6, 1, 6]]), source_traj="t", start_index=0, L=3)
    segment = Segment(steps=np.array([[0, 3, 1], [1, 3, 2]]), source_traj="t", start_index=0, L=5)
    assert segment.length == 2
    assert not segment.steps.flags.writeable


def test_normalized_return_divides_by_nominal_length():
    reward = np.array([0.0, 0.0, 1.0])
    segment = Segment(steps=np.array([[0, 3, 1], [1, 3, 2]]), source_traj="t", start_index=0, L=4)
    assert normalized_return(segment, reward) == 0.25


def test_sample_segments_stay_inside_trajectories(trap):
    mdp, q = trap
    pool = collect_trajectories(mdp, q, 0.0, 30, 40, np.random.default_rng(0))
    segments = sample_segments(pool, 5, 200, np.random.default_rng(1))
    by_id = {t.traj_id: t for t in pool}
    for segment in segments:
        source = by_id[segment.source_traj].steps
        np.testing.assert_array_equal(segment.steps, source[segment.start_index:segment.start_index + segment.length])
        assert segment.length == min(5, len(source))
    with pytest.raises(EmptyDatasetError):
        sample_segments([], 5, 3, np.random.default_rng(0))


def test_segment_starts_are_uniform_over_windows():
    first = Trajectory(steps=np.array([[0, 3, 1], [1, 3, 2], [2, 1, 5], [5, 1, 8]]), traj_id="a")
    second = Trajectory(steps=np.array([[0, 1, 3], [3, 1, 6], [6, 3, 7], [7, 3, 8]]), traj_id="b")
    segments = sample_segments([first, second], 2, 100_000, np.random.default_rng(9))
    share = np.mean([s.source_traj == "a" for s in segments])
    assert abs(share - 0.5) < 0.01
    starts = np.bincount([s.start_index for s in segments], minlength=3)
    np.testing.assert_allclose(starts / len(segments), 1.0 / 3.0, atol=0.01)


def test_bradley_terry_frequency_matches_probability():
    reward = np.array([0.0, 1.0, 0.0, 0.5])
    seg_high = Segment(steps=np.array([[0, 0, 1]]), source_traj="a", start_index=0, L=1)
    seg_low = Segment(steps=np.array([[2, 0, 3]]), source_traj="b", start_index=0, L=1)
    n = 10_000
    obs = simulate_preferences([seg_high, seg_low], reward, 2.0, n, np.random.default_rng(3))

    p = np.array([
        preference_probability(normalized_return(o.seg_a, reward), normalized_return(o.seg_b, reward), 2.0)
        for o in obs
    ])
    labels = np.array([o.label for o in obs])
    expected, std = p.sum(), np.sqrt(np.sum(p * (1 - p)))
    # 99% interval
    assert abs(labels.sum() - expected) < 2.576 * std
    assert preference_probability(0.5, 0.5, 5.0) == 0.5


def test_demonstrations_follow_boltzmann_policy(trap):
    mdp, q = trap
    demos = simulate_demonstrations(mdp, q, 10.0, 3, 50, np.random.default_rng(0))
    assert [d.trajectory.traj_id for d in demos] == ["demo-0", "demo-1", "demo-2"]
    assert all(d.trajectory.states[0] == mdp.start_state for d in demos)


def test_large_beta_demonstrations_follow_the_greedy_path(trap):
    mdp, q = trap
    goal = mdp.n_states - 1
    for demo in simulate_demonstrations(mdp, q, 1000.0, 5, 50, np.random.default_rng(1)):
        steps = demo.trajectory.steps
        best = q.values[steps[:, 0]].max(axis=1)
        np.testing.assert_allclose(q.values[steps[:, 0], steps[:, 1]], best, atol=1e-6)
        assert steps[-1, 2] == goal


def test_rational_demonstrations_are_near_optimal():
    mdp = build_grid_env("sparse", size=3)
    q = value_iteration(mdp)
    demos = simulate_demonstrations(mdp, q, 10.0, 1000, 30, np.random.default_rng(2))
    mean_return = np.mean([discounted_return(mdp.reward, d.trajectory, mdp.gamma) for d in demos])
    optimal = q.values[mdp.start_state].max()
    assert mean_return >= 0.98 * optimal


def test_zero_beta_pool_is_a_uniform_rollout(trap):
    mdp, q = trap
    pool = collect_trajectories(mdp, q, 0.0, 20, 30, np.random.default_rng(6))
    rng = np.random.default_rng(6)
    uniform = [rollout(mdp, uniform_policy(mdp), 30, rng, traj_id=f"pool-{i}") for i in range(20)]
    for ours, reference in zip(pool, uniform):
        np.testing.assert_array_equal(ours.steps, reference.steps)

    again = collect_trajectories(mdp, q, 2.0, 20, 30, np.random.default_rng(6))
    repeat = collect_trajectories(mdp, q, 2.0, 20, 30, np.random.default_rng(6))
    for a, b in zip(again, repeat):
        np.testing.assert_array_equal(a.steps, b.steps)
        assert a.truncated_at == b.truncated_at


def test_random_start_pool(trap):
    mdp, q = trap
    pool = collect_trajectories(mdp, q, 0.0, 200, 10, np.random.default_rng(8), random_start=True)
    starts = np.array([t.states[0] for t in pool])
    assert not np.any(mdp.terminal[starts])
    assert len(np.unique(starts)) > 10
    assert all(len(t) <= 10 for t in pool)


def test_ratings_fill_quantile_bins():
    returns = np.arange(10, dtype=np.float64)
    ratings, cutpoints = assign_ratings(returns, 5)
    assert len(cutpoints) == 4
    assert list(np.bincount(ratings, minlength=6)[1:]) == [2, 2, 2, 2, 2]
    assert np.all(np.diff(ratings) >= 0)

    tied, _ = assign_ratings(np.ones(6), 4)
    assert np.all(tied == 2)


def test_tied_returns_get_the_middle_of_their_span():
    returns = np.array([-1.0] * 18 + [0.0] * 78 + [1.0] * 4)
    ratings, cutpoints = assign_ratings(returns, 5)
    np.testing.assert_array_equal(cutpoints, 0.0)
    assert set(ratings[returns < 0]) == {1}
    assert set(ratings[returns == 0]) == {3}
    assert set(ratings[returns > 0]) == {5}

    # the first two cutpoints coincide, so a return equal to them spans categories 1 to 3
    ratings, cutpoints = assign_ratings(np.array([0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]), 4)
    np.testing.assert_array_equal(cutpoints, [1.0, 1.0, 2.0])
    assert list(ratings) == [1, 1, 2, 2, 2, 2, 3, 3, 4, 4]


def test_rating_bins_are_balanced_for_continuous_returns():
    mdp = build_grid_env("cliff", size=10)
    q = value_iteration(mdp)
    rng = np.random.default_rng(12)
    pool = collect_trajectories(mdp, q, 0.0, 200, 10, rng, random_start=True)
    segments = sample_segments(pool, 5, 500, rng)
    # jitter the reward so that segment returns have no ties
    reward = mdp.reward + rng.normal(scale=0.01, size=mdp.n_states)
    K = 5
    obs, _ = simulate_ratings(segments, reward, K)
    shares = np.bincount([o.rating for o in obs], minlength=K + 1)[1:] / len(obs)
    assert np.all(shares >= 0.5 / K)
    assert np.all(shares <= 2.0 / K)


def test_simulate_ratings_needs_enough_segments(trap):
    mdp, q = trap
    pool = collect_trajectories(mdp, q, 0.0, 10, 30, np.random.default_rng(0))
    segments = sample_segments(pool, 5, 3, np.random.default_rng(0))
    with pytest.raises(EmptyDatasetError):
        simulate_ratings(segments, mdp.reward, 5)
    obs, cutpoints = simulate_ratings(segments, mdp.reward, 3)
    assert all(1 <= o.rating <= 3 for o in obs)


def test_cumulative_regret_recursion():
    np.testing.assert_allclose(cumulative_regret(np.array([0.0, 1.0, 0.0]), 0.1), [0.0, 1.0, 0.1])
    hazards = stop_hazards(np.array([0.0, 1.0, 0.1]), 1.0)
    np.testing.assert_allclose(hazards, [0.0, 1.0 - np.exp(-1.0), 1.0 - np.exp(-0.1)])


def test_instantaneous_regret():
    q = QTable(values=np.array([[1.0, 0.0], [0.5, 2.0]]))
    steps = np.array([[0, 1, 1], [1, 1, 0]])
    np.testing.assert_allclose(instantaneous_regret(q, steps), [1.0, 0.0])


def test_second_step_stop_probability():
    q = QTable(values=np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]))
    # regret 0, 1, 0 so the cumulative regret is 0, 1, 0.1
    segment = Segment(steps=np.array([[0, 0, 1], [1, 1, 2], [2, 0, 3]]), source_traj="t", start_index=0, L=3)
    params = SimulatorParams(rho=0.1)
    stops = simulate_stops([segment] * 10_000, q, params, np.random.default_rng(13), lam=1.0)
    times = np.array([0 if o.censored else o.stop_time for o in stops])
    assert not np.any(times == 1)
    assert np.mean(times == 2) == pytest.approx(1.0 - np.exp(-1.0), abs=0.015)


def test_zero_regret_segments_are_never_stopped(trap):
    mdp, _ = trap
    params = SimulatorParams()
    q = QTable(values=np.zeros((mdp.n_states, mdp.n_actions)))
    optimal = collect_trajectories(mdp, q, 0.0, 5, 40, np.random.default_rng(0))
    segments = sample_segments(optimal, 5, 20, np.random.default_rng(1))
    assert calibrate_stop_sensitivity(segments, q, params) == 0.0
    stops = simulate_stops(segments, q, params, np.random.default_rng(2))
    assert all(o.censored for o in stops)


def test_stops_occur_within_segments(trap):
    mdp, q = trap
    params = SimulatorParams(L=6)
    pool = collect_trajectories(mdp, q, 0.0, 40, 60, np.random.default_rng(0))
    segments = sample_segments(pool, 6, 100, np.random.default_rng(1))
    lam = calibrate_stop_sensitivity(segments, q, params)
    assert lam > 0
    stops = simulate_stops(segments, q, params, np.random.default_rng(2), lam=lam)
    stopped = [o for o in stops if not o.censored]
    assert stopped
    assert all(1 <= o.stop_time <= o.segment.length for o in stopped)


def _small_dataset():
    traj = Trajectory(steps=np.array([[0, 3, 1], [1, 3, 2], [2, 1, 5], [5, 1, 8]]), traj_id="pool-0")
    demo = Trajectory(steps=np.array([[0, 1, 3], [3, 3, 4]]), traj_id="demo-0", truncated_at=2)
    seg_a = Segment(steps=traj.steps[0:2], source_traj="pool-0", start_index=0, L=2)
    seg_b = Segment(steps=traj.steps[1:3], source_traj="pool-0", start_index=1, L=2)
    return FeedbackDataset(
        n_states=9,
        n_actions=5,
        preferences=[PreferenceObs(seg_a, seg_b, 0)],
        demonstrations=[DemoObs(demo)],
        ratings=[RatingObs(seg_b, 3)],
        stops=[StopObs(seg_a, None), StopObs(seg_b, 2)],
        trajectories={"pool-0": traj},
        rating_levels=4,
    )


def test_extract_transitions_deduplicates_positions():
    transitions = extract_transitions(_small_dataset())
    # demo: one pair; pool-0 positions 0 and 1 appear in several segments but count once
    assert transitions.tolist() == [[0, 1, 3, 3], [0, 3, 1, 3], [1, 3, 2, 1]]


def test_dataset_save_and_load(tmp_path):
    dataset = _small_dataset()
    path = tmp_path / "feedback_seed0.txt"
    save_dataset(dataset, str(path))
    assert path.read_text().startswith("# mavrl-feedback v1\nM 9 5 4\n")

    loaded = load_dataset(str(path))
    assert loaded.counts() == dataset.counts()
    assert loaded.rating_levels == 4
    assert loaded.preferences[0].label == 0
    np.testing.assert_array_equal(loaded.preferences[0].seg_b.steps, dataset.preferences[0].seg_b.steps)
    assert loaded.demonstrations[0].trajectory.truncated_at == 2
    assert [o.stop_time for o in loaded.stops] == [None, 2]
    assert loaded.ratings[0].rating == 3
    np.testing.assert_array_equal(extract_transitions(loaded), extract_transitions(dataset))


def test_load_rejects_malformed_files(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# something else\n")
    with pytest.raises(ConfigurationError):
        load_dataset(str(path))
    path.write_text("# mavrl-feedback v1\nM 9 5 4\nR missing 0 1 1 2\n")
    with pytest.raises(ConfigurationError):
        load_dataset(str(path))


def test_restricted_to_and_modalities():
    dataset = _small_dataset()
    assert dataset.present_modalities() == "PDRS"
    only = dataset.restricted_to("DS")
    assert only.present_modalities() == "DS"
    assert not FeedbackDataset(n_states=2, n_actions=2).present_modalities()
    assert FeedbackDataset(n_states=2, n_actions=2).is_empty()


def test_simulator_params_validation():
    with pytest.raises(ConfigurationError):
        SimulatorParams(K=1)
    with pytest.raises(ConfigurationError):
        SimulatorParams(rho=0.0)
    with pytest.raises(ConfigurationError):
        SimulatorParams(pool_steps=0)


if __name__ == '__main__':
    pytest.main([__file__, "-v"])
