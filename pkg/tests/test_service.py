import socket
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from config.models import LAPTOP_ENGINE_CONFIG
from conftest import FAST_ENGINE
from core.errors import ProtocolError
from policy.engine import run_session
from policy.intervention import InterventionKind, InterventionSpec
from procedure.graph import linear_graph
from service import protocol
from service.protocol import MessageKind
from service.replay import replay
from service.server import GraphRegistry, start_server, stop_server
from simulator.simulator import Scenario, simulate_session
from tracker.tracker import FrameObservation

REMIND = InterventionSpec(target=3, kind=InterventionKind.REMIND_IN_ADVANCE, k_minus=15.0)
SHORT_REMIND = InterventionSpec(target=3, kind=InterventionKind.REMIND_IN_ADVANCE, k_minus=2.0)


@pytest.fixture
def server(linear3):
    registry = GraphRegistry()
    registry.register(linear3, [REMIND])
    server, thread = start_server(registry, FAST_ENGINE, host="127.0.0.1", port=0)
    yield server
    stop_server(server, thread)


def _port(server):
    return server.server_address[1]


def _session(graph, seed=0):
    return simulate_session(Scenario(graph=graph, confusion=np.eye(graph.n_steps), seed=seed), f"svc-{seed}")


def test_replay_matches_the_offline_engine(server, linear3):
    session = _session(linear3)
    result = replay(session.frames, linear3.graph_hash, port=_port(server), speed=0, session="svc-0")
    offline = run_session(linear3, [REMIND], session.frames, FAST_ENGINE)
    assert result.status == 0
    assert result.events == offline.events
    assert result.bye["frames"] == len(session.frames)
    assert result.bye["events"] == len(offline.events)
    assert result.bye["latency_p99_s"] >= result.bye["latency_p50_s"]
    assert result.bye["latency_p99_s"] < 0.2


def test_hello_specs_replace_the_defaults(server, linear3):
    session = _session(linear3)
    notify = InterventionSpec(target=3, kind=InterventionKind.NOTIFY_IF_FORGOTTEN, k_plus=15.0)
    result = replay(session.frames, linear3.graph_hash, port=_port(server), speed=0, specs=[notify])
    assert result.status == 0
    assert result.events == []


def test_bye_flushes_notifications_due_after_the_last_frame(server, linear3):
    session = simulate_session(Scenario(graph=linear3, confusion=np.eye(3), skip={3: 1.0}), "svc-skip")
    notify = InterventionSpec(target=3, kind=InterventionKind.NOTIFY_IF_FORGOTTEN, k_plus=15.0)
    result = replay(session.frames, linear3.graph_hash, port=_port(server), speed=0, specs=[notify])
    offline = run_session(linear3, [notify], session.frames, FAST_ENGINE)
    assert result.status == 0
    assert len(offline.events) == 1
    assert offline.events[0].t > session.frames[-1].t
    assert result.events == offline.events
    assert result.bye["events"] == 1


def test_unknown_graph_is_refused(server):
    frames = [FrameObservation(t=0.2, probs=np.array([1.0, 0.0, 0.0]))]
    result = replay(frames, "0" * 64, port=_port(server), speed=0)
    assert result.status == 1
    assert result.error.startswith(protocol.GRAPH_MISMATCH)


def test_empty_stream_gets_a_bye(server, linear3):
    result = replay([], linear3.graph_hash, port=_port(server), speed=0)
    assert result.status == 0
    assert result.bye["frames"] == 0
    assert result.bye["events"] == 0
    assert result.bye["latency_p50_s"] is None


def test_frames_going_back_are_rejected(server, linear3):
    probs = np.array([1.0, 0.0, 0.0])
    frames = [FrameObservation(t=0.2, probs=probs), FrameObservation(t=0.4, probs=probs),
              FrameObservation(t=0.2, probs=probs)]
    result = replay(frames, linear3.graph_hash, port=_port(server), speed=0)
    assert result.status == 1
    assert result.error.startswith(protocol.OUT_OF_ORDER)


def test_wrong_width_frames_are_malformed(server, linear3):
    frames = [FrameObservation(t=0.2, probs=np.array([0.5, 0.5]))]
    result = replay(frames, linear3.graph_hash, port=_port(server), speed=0)
    assert result.status == 1
    assert result.error.startswith(protocol.MALFORMED)


def test_concurrent_sessions_are_independent(server, linear3):
    sessions = [_session(linear3, seed) for seed in range(3)]
    with ThreadPoolExecutor(max_workers=3) as executor:
        results = list(executor.map(
            lambda s: replay(s.frames, linear3.graph_hash, port=_port(server), speed=0, session=s.log.session_id),
            sessions))
    for session, result in zip(sessions, results):
        assert result.status == 0
        assert result.events == run_session(linear3, [REMIND], session.frames, FAST_ENGINE).events


def test_refused_connection_fails_cleanly(linear3):
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
    result = replay([], linear3.graph_hash, port=port, speed=0)
    assert result.status == 1
    assert "cannot connect" in result.error


def test_messages_are_single_json_lines():
    frame = FrameObservation(t=0.2, probs=np.array([0.25, 0.75]))
    line = protocol.frame_message("s", frame)
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    record = protocol.decode_message(line)
    assert record["kind"] is MessageKind.FRAME
    np.testing.assert_array_equal(protocol.frame_from_message(record).probs, frame.probs)


def test_garbage_and_oversized_messages_are_rejected():
    with pytest.raises(ProtocolError):
        protocol.decode_message(b"not json\n")
    with pytest.raises(ProtocolError):
        protocol.decode_message(b'{"kind": "shout"}\n')
    with pytest.raises(ProtocolError):
        protocol.encode_message(MessageKind.FRAME, "s", probs=[0.0] * 20_000)


@pytest.fixture
def laptop_server():
    graph = linear_graph([(8.0, 0.0), (8.0, 0.0), (8.0, 0.0)], names=["wash", "cut", "cook"])
    registry = GraphRegistry()
    registry.register(graph, [SHORT_REMIND])
    server, thread = start_server(registry, LAPTOP_ENGINE_CONFIG, host="127.0.0.1", port=0)
    yield server, graph
    stop_server(server, thread)


@pytest.mark.slow
@pytest.mark.parametrize("speed", [0.0, 1.0, 4.0])
def test_concurrent_replays_match_offline_runs_at_any_speed(laptop_server, speed):
    server, graph = laptop_server
    sessions = [_session(graph, seed) for seed in range(10)]
    with ThreadPoolExecutor(max_workers=10) as executor:
        results = list(executor.map(
            lambda s: replay(s.frames, graph.graph_hash, port=_port(server), speed=speed,
                             session=s.log.session_id), sessions))
    for session, result in zip(sessions, results):
        assert result.status == 0
        offline = run_session(graph, [SHORT_REMIND], session.frames, LAPTOP_ENGINE_CONFIG)
        assert result.events == offline.events
        assert result.bye["latency_p99_s"] < 0.2
