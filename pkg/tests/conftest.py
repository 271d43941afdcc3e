import numpy as np
import pytest

from config.models import EngineConfig, ForecastConfig, PolicyConfig
from procedure.graph import Edge, StepDef, TransitionGraph, linear_graph
from tracker.tracker import BeliefState

# small sample counts keep whole-session runs fast; sampling is exact for zero-variance steps anyway
FAST_ENGINE = EngineConfig(
    "test",
    forecast=ForecastConfig(n_samples=200, chunk_size=100),
    policy=PolicyConfig(tick=1.0),
)


def fork_graph(first: float = 5.0, branch_a: float = 10.0, branch_b: float = 20.0, last: float = 5.0,
               p_a: float = 0.5, rel_std: float = 0.0) -> TransitionGraph:
    """s1 → {s2 (p_a), s3} → s4; each step's std is rel_std times its mean."""
    steps = tuple(
        StepDef(i + 1, name, mean, rel_std * mean)
        for i, (name, mean) in enumerate(
            [("start", first), ("branch a", branch_a), ("branch b", branch_b), ("finish", last)])
    )
    edges = (Edge(1, 2, p_a), Edge(1, 3, 1.0 - p_a), Edge(2, 4, 1.0), Edge(3, 4, 1.0))
    return TransitionGraph(steps=steps, edges=edges, initial=((1, 1.0),), terminals=frozenset({4}))


def point_belief(graph: TransitionGraph, step_id: int, elapsed: float = 0.0, t: float = 0.0) -> BeliefState:
    posterior = np.zeros(graph.n_steps)
    posterior[graph.index_of[step_id]] = 1.0
    elapsed_in_step = np.zeros(graph.n_steps)
    elapsed_in_step[graph.index_of[step_id]] = elapsed
    return BeliefState(t=t, posterior=posterior, elapsed_in_step=elapsed_in_step, step_ids=tuple(graph.step_ids))


@pytest.fixture
def linear3() -> TransitionGraph:
    return linear_graph([(30.0, 0.0), (30.0, 0.0), (30.0, 0.0)], names=["wash", "cut", "cook"])


@pytest.fixture
def fork() -> TransitionGraph:
    return fork_graph()
