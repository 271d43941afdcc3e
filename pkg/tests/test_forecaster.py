import math
import time

import numpy as np
import pytest

from config.models import LAPTOP_ENGINE_CONFIG, ForecastConfig
from conftest import fork_graph, point_belief
from policy.engine import SessionEngine
from policy.intervention import InterventionKind, InterventionSpec
from core.errors import UnreachableTargetError
from forecaster.forecaster import (RemainingTimeDistribution, dump_record, exact_expected_remaining_time,
                                   histogram_entropy, sample_remaining_time, sample_remaining_times, summarize)
from procedure.graph import Edge, StepDef, TransitionGraph, linear_graph
from tracker.tracker import BeliefState, FrameObservation

FIXED_MEAN = ForecastConfig(duration_model="fixed-mean")


def _two_branch():
    # branch totals of 10 s and 20 s after s1 has fully elapsed
    return fork_graph(first=5.0, branch_a=10.0, branch_b=20.0, last=5.0)


def test_linear_chain_is_deterministic():
    graph = linear_graph([(10.0, 0.0), (20.0, 0.0), (5.0, 0.0)])
    dist = sample_remaining_time(graph, point_belief(graph, 1), 3, FIXED_MEAN)
    assert np.all(dist.samples == 30.0)
    assert dist.expectation == 30.0
    assert dist.entropy == 0.0
    assert dist.reachable_mass == 1.0
    assert exact_expected_remaining_time(graph, point_belief(graph, 1), 3) == 30.0


def test_two_branch_fork_has_two_bins():
    graph = _two_branch()
    belief = point_belief(graph, 1, elapsed=5.0)
    dist = sample_remaining_time(graph, belief, 4, FIXED_MEAN)
    assert set(np.unique(dist.samples)) == {10.0, 20.0}
    assert dist.expectation == pytest.approx(15.0, rel=0.02)
    assert dist.entropy == pytest.approx(math.log(2), abs=0.01)
    assert exact_expected_remaining_time(graph, belief, 4) == 15.0


def test_elapsed_time_shortens_the_current_step():
    graph = linear_graph([(30.0, 0.0), (10.0, 0.0), (5.0, 0.0)])
    dist = sample_remaining_time(graph, point_belief(graph, 1, elapsed=12.0), 3, FIXED_MEAN)
    assert dist.expectation == pytest.approx(28.0)


def test_being_on_the_target_means_zero_remaining(linear3):
    dist = sample_remaining_time(linear3, point_belief(linear3, 2), 2, FIXED_MEAN)
    assert dist.expectation == 0.0
    assert dist.entropy == 0.0


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_monte_carlo_agrees_with_enumeration(seed):
    steps = (StepDef(1, "a", 12.0, 4.0), StepDef(2, "b", 30.0, 10.0), StepDef(3, "c", 90.0, 20.0),
             StepDef(4, "d", 15.0, 5.0), StepDef(5, "e", 20.0, 2.0))
    edges = (Edge(1, 2, 0.3), Edge(1, 3, 0.7), Edge(2, 4, 1.0), Edge(3, 4, 0.5), Edge(3, 5, 0.5), Edge(4, 5, 1.0))
    graph = TransitionGraph(steps=steps, edges=edges, initial=((1, 1.0),), terminals=frozenset({5}))
    belief = point_belief(graph, 1)
    exact = exact_expected_remaining_time(graph, belief, 5)
    dist = sample_remaining_time(graph, belief, 5, ForecastConfig(n_samples=10_000, seed=seed))
    assert abs(dist.expectation - exact) <= 0.02 * exact


def test_same_seed_same_samples_regardless_of_workers():
    graph = fork_graph(first=8.0, branch_a=12.0, branch_b=40.0, last=3.0)
    graph = TransitionGraph(
        steps=tuple(StepDef(s.id, s.name, s.mean_duration, s.mean_duration / 4) for s in graph.steps),
        edges=graph.edges, initial=graph.initial, terminals=graph.terminals,
    )
    belief = point_belief(graph, 1, t=4.2)
    serial = sample_remaining_time(graph, belief, 4, ForecastConfig(n_samples=3_000, seed=9))
    threaded = sample_remaining_time(graph, belief, 4, ForecastConfig(n_samples=3_000, seed=9, workers=3))
    np.testing.assert_array_equal(serial.samples, threaded.samples)
    other = sample_remaining_time(graph, belief, 4, ForecastConfig(n_samples=3_000, seed=10))
    assert not np.array_equal(serial.samples, other.samples)


def test_unreachable_mass_is_dropped_and_reported():
    graph = fork_graph()
    posterior = np.array([0.0, 0.5, 0.5, 0.0])
    belief = BeliefState(t=0.0, posterior=posterior, elapsed_in_step=np.zeros(4), step_ids=(1, 2, 3, 4))
    dist = sample_remaining_time(graph, belief, 2, FIXED_MEAN)
    # samples on s3 cannot reach s2
    assert dist.reachable_mass == pytest.approx(0.5)
    assert np.all(dist.samples == 0.0)


def test_target_behind_the_belief_is_unreachable():
    graph = fork_graph()
    with pytest.raises(UnreachableTargetError):
        sample_remaining_time(graph, point_belief(graph, 4), 1, FIXED_MEAN)
    with pytest.raises(UnreachableTargetError):
        exact_expected_remaining_time(graph, point_belief(graph, 4), 1)


def test_histogram_entropy_closed_forms():
    assert histogram_entropy(np.full(100, 25.0), 1.0) == 0.0
    assert histogram_entropy(np.array([0.5, 1.5, 2.5, 3.5]), 1.0) == pytest.approx(math.log(4))


def test_summarize_point_mass():
    dist = RemainingTimeDistribution(target=3, t=1.0, samples=np.full(10, 25.0), bin_width=1.0,
                                     expectation=25.0, entropy=0.0, reachable_mass=1.0)
    assert summarize(dist) == (25.0, 0.0)
    record = dump_record(dist)
    assert record["histogram"] == [[25.0, 1.0]]
    assert record["target"] == 3


def _varied_fork():
    graph = fork_graph(first=8.0, branch_a=12.0, branch_b=40.0, last=3.0)
    return TransitionGraph(
        steps=tuple(StepDef(s.id, s.name, s.mean_duration, s.mean_duration / 4) for s in graph.steps),
        edges=graph.edges, initial=graph.initial, terminals=graph.terminals,
    )


def test_a_target_gets_the_same_samples_alone_or_batched():
    graph = _varied_fork()
    belief = BeliefState(t=3.0, posterior=np.array([0.6, 0.3, 0.1, 0.0]),
                         elapsed_in_step=np.array([3.0, 1.0, 0.5, 0.0]), step_ids=(1, 2, 3, 4))
    cfg = ForecastConfig(n_samples=2_000, seed=4)
    batched = sample_remaining_times(graph, belief, [2, 3, 4], cfg)
    for target in (2, 3, 4):
        alone = sample_remaining_time(graph, belief, target, cfg)
        np.testing.assert_array_equal(batched[target].samples, alone.samples)
        assert batched[target].entropy == alone.entropy


def test_batched_forecast_leaves_out_unreachable_targets():
    graph = fork_graph()
    batched = sample_remaining_times(graph, point_belief(graph, 4), [1, 4], FIXED_MEAN)
    assert list(batched) == [4]
    assert batched[4].expectation == 0.0
    with pytest.raises(UnreachableTargetError):
        sample_remaining_times(graph, point_belief(graph, 1), [9], FIXED_MEAN)


def _double_fork_graph() -> TransitionGraph:
    """14 steps: two consecutive forks, each with a two-step and a one-step branch, then a linear tail."""
    means = [20.0, 35.0, 25.0, 60.0, 15.0, 40.0, 30.0, 20.0, 45.0, 25.0, 30.0, 20.0, 15.0, 25.0]
    steps = tuple(StepDef(i + 1, f"step {i + 1}", mean, 0.2 * mean) for i, mean in enumerate(means))
    edges = (
        Edge(1, 2, 1.0), Edge(2, 3, 0.6), Edge(2, 5, 0.4), Edge(3, 4, 1.0), Edge(4, 6, 1.0), Edge(5, 6, 1.0),
        Edge(6, 7, 0.5), Edge(6, 9, 0.5), Edge(7, 8, 1.0), Edge(8, 10, 1.0), Edge(9, 10, 1.0),
        Edge(10, 11, 1.0), Edge(11, 12, 1.0), Edge(12, 13, 1.0), Edge(13, 14, 1.0),
    )
    return TransitionGraph(steps=steps, edges=edges, initial=((1, 1.0),), terminals=frozenset({14}))


@pytest.mark.slow
def test_laptop_preset_keeps_per_frame_latency_low():
    graph = _double_fork_graph()
    specs = [InterventionSpec(target, InterventionKind.REMIND_IN_ADVANCE) for target in (2, 6, 8, 11, 14)]
    engine = SessionEngine(graph, specs, LAPTOP_ENGINE_CONFIG)
    rng = np.random.default_rng(0)
    latencies = []
    for i in range(1, 301):
        frame = FrameObservation(t=round(i * 0.2, 6), probs=rng.dirichlet(np.ones(graph.n_steps)))
        started = time.perf_counter()
        engine.feed(frame)
        latencies.append(time.perf_counter() - started)
    assert np.percentile(latencies, 99) < 0.2


def _forked_graph(seed: int) -> TransitionGraph:
    """5-8 steps with up to three two-way forks that skip one step; std is 15% of each mean."""
    rng = np.random.default_rng(seed)
    n_steps = int(rng.integers(5, 9))
    means = rng.uniform(10.0, 60.0, size=n_steps)
    steps = tuple(StepDef(i + 1, f"step {i + 1}", float(m), 0.15 * float(m)) for i, m in enumerate(means))
    fork_sources = set(int(s) for s in rng.choice(np.arange(1, n_steps - 1), size=3, replace=False))
    edges = []
    for source in range(1, n_steps):
        if source in fork_sources:
            p = float(rng.uniform(0.2, 0.8))
            edges.extend([Edge(source, source + 1, p), Edge(source, source + 2, 1.0 - p)])
        else:
            edges.append(Edge(source, source + 1, 1.0))
    return TransitionGraph(steps=steps, edges=tuple(edges), initial=((1, 1.0),), terminals=frozenset({n_steps}))


@pytest.mark.slow
@pytest.mark.parametrize("graph_seed", range(10))
def test_monte_carlo_matches_enumeration_across_graphs(graph_seed):
    graph = _forked_graph(graph_seed)
    belief = point_belief(graph, 1)
    exact = exact_expected_remaining_time(graph, belief, graph.n_steps)
    for seed in range(20):
        dist = sample_remaining_time(graph, belief, graph.n_steps, ForecastConfig(n_samples=10_000, seed=seed))
        assert abs(dist.expectation - exact) <= 0.02 * exact
