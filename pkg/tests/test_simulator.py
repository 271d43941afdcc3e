import numpy as np
import pytest

from conftest import fork_graph
from core.errors import SimulationError
from evaluation.metrics import frame_macro_f1
from procedure.graph import Edge, StepDef, TransitionGraph, graph_to_dict, linear_graph
from simulator.simulator import (Scenario, confusion_from_f1, emit_observation, load_scenario, save_scenario,
                                 simulate_batch, simulate_session, uniform_confusion_with_diagonal,
                                 write_simulated_session)
from tracker.tracker import load_frames, raw_argmax_steps


def test_identity_confusion_gives_delta_frames(linear3):
    session = simulate_session(Scenario(graph=linear3, confusion=np.eye(3)), "id")
    assert session.log.step_sequence == [1, 2, 3]
    assert [(a.start, a.end) for a in session.log.annotations] == [(0.0, 30.0), (30.0, 60.0), (60.0, 90.0)]
    assert len(session.frames) == 450
    for frame, step in zip(session.frames, session.frame_steps):
        expected = np.zeros(3)
        expected[step - 1] = 1.0
        np.testing.assert_array_equal(frame.probs, expected)
    assert session.frames[0].t == 0.2
    assert session.frames[-1].t == 90.0


def test_forced_skip_is_logged(linear3):
    scenario = Scenario(graph=linear3, confusion=np.eye(3), skip={2: 1.0})
    for session in simulate_batch(scenario, 5):
        assert session.log.skipped == (2,)
        assert session.log.step_sequence == [1, 3]
        assert 2 not in session.frame_steps


def test_same_seed_same_sessions():
    graph = fork_graph()
    scenario = Scenario(graph=graph, confusion=uniform_confusion_with_diagonal(4, 0.7), seed=7, duration_jitter=1.0)
    first = simulate_session(scenario, "s")
    second = simulate_session(scenario, "s")
    assert first.log == second.log
    np.testing.assert_array_equal(np.vstack([f.probs for f in first.frames]),
                                  np.vstack([f.probs for f in second.frames]))


def test_sessions_differ_by_id():
    graph = linear_graph([(20.0, 6.0), (20.0, 6.0)])
    scenario = Scenario(graph=graph, confusion=np.eye(2), seed=1)
    sessions = simulate_batch(scenario, 4)
    assert len({tuple(a.end for a in s.log.annotations) for s in sessions}) > 1


def test_uniform_row_averages_to_uniform():
    graph = linear_graph([(10.0, 0.0)] * 4)
    scenario = Scenario(graph=graph, confusion=np.full((4, 4), 0.25), seed=2)
    draws = np.vstack([emit_observation(1, scenario, i).probs for i in range(20_000)])
    np.testing.assert_allclose(draws.mean(axis=0), 0.25, rtol=0.02)


def test_diagonal_half_confusion_gives_half_raw_f1():
    graph = linear_graph([(30.0, 5.0)] * 5)
    scenario = Scenario(graph=graph, confusion=uniform_confusion_with_diagonal(5, 0.5), seed=11)
    truth, raw = [], []
    for session in simulate_batch(scenario, 10):
        truth.extend(session.frame_steps)
        raw.extend(raw_argmax_steps(graph, session.frames))
    assert frame_macro_f1(truth, raw, graph.step_ids) == pytest.approx(0.5, abs=0.1)


def test_confusion_from_f1_is_row_stochastic():
    confusion = confusion_from_f1(4, {1: 0.83, 3: 0.28}, default_diagonal=0.6, background=True)
    assert confusion.shape == (4, 5)
    np.testing.assert_allclose(confusion.sum(axis=1), 1.0)
    assert confusion[0, 0] == 0.83
    assert confusion[2, 2] == 0.28
    assert confusion[1, 1] == 0.6


def test_bad_confusion_is_rejected(linear3):
    with pytest.raises(SimulationError):
        Scenario(graph=linear3, confusion=np.full((3, 3), 0.5))
    with pytest.raises(SimulationError):
        Scenario(graph=linear3, confusion=np.eye(2))
    with pytest.raises(SimulationError):
        Scenario(graph=linear3, confusion=np.eye(3), skip={7: 0.5})


def test_tail_keeps_emitting_the_last_step(linear3):
    scenario = Scenario(graph=linear3, confusion=np.eye(3), skip={3: 1.0}, tail_s=10.0)
    session = simulate_session(scenario, "tail")
    assert session.log.end_time == 60.0
    assert len(session.frames) == 350
    assert session.frame_steps[-1] == 2


def test_written_sessions_reload(tmp_path, fork):
    scenario = Scenario(graph=fork, confusion=confusion_from_f1(4, default_diagonal=0.8, background=True), seed=5)
    session = simulate_session(scenario, "w-0")
    write_simulated_session(session, scenario, tmp_path)
    frames = load_frames(tmp_path / "frames" / "w-0.csv")
    assert [f.t for f in frames] == [f.t for f in session.frames]
    np.testing.assert_array_equal(frames[3].probs, session.frames[3].probs)
    assert (tmp_path / "sessions" / "w-0.json").is_file()


def test_scenario_file_round_trip(tmp_path, fork):
    scenario = Scenario(graph=fork, confusion=np.eye(4), skip={2: 0.5}, seed=3, tail_s=20.0)
    reloaded = load_scenario(save_scenario(scenario, tmp_path / "scenario.json"))
    assert reloaded.graph == fork
    assert reloaded.skip == {2: 0.5}
    assert reloaded.tail_s == 20.0
    np.testing.assert_array_equal(reloaded.confusion, scenario.confusion)


def test_off_diagonal_mass_is_spread_over_every_other_step():
    confusion = confusion_from_f1(8, {3: 0.3})
    np.testing.assert_allclose(confusion[2], [0.1, 0.1, 0.3, 0.1, 0.1, 0.1, 0.1, 0.1])
    # the true step keeps the largest share even at low detectability
    assert confusion[2].argmax() == 2
    np.testing.assert_array_equal(confusion[0], np.eye(8)[0])


def test_scenario_file_can_give_f1_instead_of_a_matrix(fork):
    data = graph_to_dict(fork)
    data.update({"f1": {"2": 0.5}, "default_diagonal": 0.9})
    scenario = Scenario.from_dict(data)
    np.testing.assert_allclose(scenario.confusion, confusion_from_f1(4, {2: 0.5}, 0.9))
    assert scenario.confusion[1, 1] == 0.5


def test_walk_that_never_reaches_a_terminal_is_cut_off():
    steps = (StepDef(1, "a", 10.0), StepDef(2, "b", 10.0), StepDef(3, "c", 10.0))
    edges = (Edge(1, 2, 1.0), Edge(2, 1, 1.0))
    graph = TransitionGraph(steps=steps, edges=edges, initial=((1, 1.0),), terminals=frozenset({3}))
    # both cycle steps are always skipped, so the session clock never advances
    scenario = Scenario(graph=graph, confusion=np.eye(3), skip={1: 1.0, 2: 1.0})
    with pytest.raises(SimulationError, match="without reaching a terminal"):
        simulate_session(scenario, "loop")


def test_branch_frequencies_follow_the_edge_probability():
    scenario = Scenario(graph=fork_graph(p_a=0.3), confusion=np.eye(4), seed=5)
    took_a = [2 in session.log.step_sequence for session in simulate_batch(scenario, 400)]
    assert np.mean(took_a) == pytest.approx(0.3, abs=0.07)
