import numpy as np
import pytest

from config.models import TrackerConfig
from conftest import fork_graph
from core.errors import InsufficientHistoryError, ObservationError
from procedure.graph import Edge, StepDef, TransitionGraph
from simulator.simulator import Scenario, simulate_session
from tracker.tracker import (BeliefState, FrameObservation, StepTracker, completed_steps, decode_session,
                             detect_step_completion, emission_vector, init_belief, moving_average,
                             transition_matrix, update_belief)


def _beliefs(runs):
    """One-hot beliefs over two steps, e.g. [(1, 30)] = step 1 for 30 frames."""
    beliefs = []
    for step, n_frames in runs:
        for _ in range(n_frames):
            posterior = np.zeros(2)
            posterior[step - 1] = 1.0
            beliefs.append(BeliefState(t=0.2 * (len(beliefs) + 1), posterior=posterior,
                                       elapsed_in_step=np.zeros(2), step_ids=(1, 2)))
    return beliefs


def test_initial_belief_is_the_initial_distribution():
    graph = TransitionGraph(
        steps=(StepDef(1, "a", 5.0), StepDef(2, "b", 5.0), StepDef(3, "c", 5.0)),
        edges=(Edge(1, 2, 1.0), Edge(3, 2, 1.0)),
        initial=((1, 0.6), (3, 0.4)),
        terminals=frozenset({2}),
    )
    belief = init_belief(graph)
    assert belief.t == 0.0
    np.testing.assert_allclose(belief.posterior, [0.6, 0.0, 0.4])
    assert belief.decoded_step == 1


def test_transition_rows_are_stochastic(fork):
    matrix = transition_matrix(fork, TrackerConfig())
    np.testing.assert_allclose(matrix.sum(axis=1), 1.0)
    assert matrix[0, 0] == pytest.approx(1.0 - 0.2 / 5.0)
    assert matrix[0, 1] == pytest.approx(matrix[0, 2])
    assert matrix[3, 3] == 1.0


def test_uniform_observations_follow_the_dynamics(fork):
    belief = init_belief(fork)
    obs = FrameObservation(t=0.2, probs=np.full(4, 0.25))
    updated = update_belief(belief, obs, fork)
    expected = belief.posterior @ transition_matrix(fork, TrackerConfig())
    np.testing.assert_allclose(updated.posterior, expected)
    assert updated.t == 0.2


def test_frames_must_follow_the_belief_clock(fork):
    belief = init_belief(fork)
    with pytest.raises(ObservationError):
        update_belief(belief, FrameObservation(t=0.6, probs=np.full(4, 0.25)), fork)


def test_dimension_mismatch_is_rejected(fork):
    with pytest.raises(ObservationError):
        emission_vector(FrameObservation(t=0.2, probs=np.full(3, 1 / 3)), fork.n_steps, TrackerConfig())


def test_malformed_probabilities_are_rejected():
    with pytest.raises(ObservationError):
        FrameObservation(t=0.2, probs=np.array([0.5, 0.6]))
    with pytest.raises(ObservationError):
        FrameObservation(t=0.2, probs=np.array([1.5, -0.5]))


def test_background_column_is_folded_or_dropped():
    obs = FrameObservation(t=0.2, probs=np.array([0.4, 0.2, 0.4]))
    folded = emission_vector(obs, 2, TrackerConfig(emission_smoothing=0.0))
    dropped = emission_vector(obs, 2, TrackerConfig(emission_smoothing=0.0, background="drop"))
    np.testing.assert_allclose(folded, [0.6, 0.4])
    np.testing.assert_allclose(dropped, [2 / 3, 1 / 3])


def test_elapsed_time_tracks_the_current_step(linear3):
    tracker = StepTracker(linear3)
    for i in range(50):
        belief = tracker.update(FrameObservation(t=round(0.2 * (i + 1), 6), probs=np.array([1.0, 0.0, 0.0])))
    assert belief.decoded_step == 1
    assert belief.elapsed_in_step[0] == pytest.approx(10.0, abs=0.01)


def test_gap_is_bridged_by_prediction(linear3):
    tracker = StepTracker(linear3)
    tracker.update(FrameObservation(t=0.2, probs=np.array([1.0, 0.0, 0.0])))
    tracker.advance_gap(2.2)
    assert tracker.belief.t == pytest.approx(2.0)
    belief = tracker.update(FrameObservation(t=2.2, probs=np.array([1.0, 0.0, 0.0])))
    assert belief.t == 2.2
    assert belief.posterior.sum() == pytest.approx(1.0)


def test_identity_observations_decode_the_ground_truth():
    graph = fork_graph(first=8.0, branch_a=12.0, branch_b=20.0, last=6.0)
    scenario = Scenario(graph=graph, confusion=np.eye(4), seed=3)
    session = simulate_session(scenario, "decode")
    decoded = decode_session(graph, session.frames)
    agreement = np.mean(np.array(decoded) == np.array(session.frame_steps))
    assert agreement >= 0.99


def test_moving_average_is_trailing():
    series = np.array([[1.0], [3.0], [5.0], [7.0]])
    np.testing.assert_allclose(moving_average(series, 2)[:, 0], [1.0, 2.0, 4.0, 6.0])


def test_step_held_for_six_seconds_is_complete():
    assert detect_step_completion(_beliefs([(1, 30)]), 1)


def test_step_overtaken_before_five_seconds_is_not_complete():
    # smoothing stretches the 22-frame run by two frames, still short of 25
    history = _beliefs([(1, 22), (2, 10)])
    assert not detect_step_completion(history, 1)
    assert not detect_step_completion(history, 2)


def test_detection_follows_the_smoothed_series():
    # a single-frame dip does not move the 1 s average off step 1
    history = _beliefs([(1, 12), (2, 1), (1, 12)])
    assert completed_steps(history) == frozenset({1})


def test_short_history_cannot_be_judged():
    with pytest.raises(InsufficientHistoryError):
        detect_step_completion(_beliefs([(1, 10)]), 1)


@pytest.mark.parametrize("seed", range(5))
def test_posterior_stays_normalized_on_random_streams(seed):
    graph = fork_graph(first=8.0, branch_a=12.0, branch_b=30.0, last=6.0)
    tracker = StepTracker(graph, TrackerConfig())
    rng = np.random.default_rng(seed)
    concentration = rng.uniform(0.2, 5.0)
    for i in range(1, 501):
        belief = tracker.update(FrameObservation(t=round(0.2 * i, 6),
                                                 probs=rng.dirichlet(np.full(4, concentration))))
        assert abs(belief.posterior.sum() - 1.0) <= 1e-6
        assert np.all(belief.posterior >= 0.0)
        assert np.all(belief.elapsed_in_step >= 0.0)
