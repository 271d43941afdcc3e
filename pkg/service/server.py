"""Threaded TCP server: one SessionEngine per connection, events pushed as they fire."""
import logging
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import settings
from config.models import EngineConfig
from core.errors import ObservationError, PolicyError, ProtocolError
from policy.engine import SessionEngine
from policy.intervention import InterventionSpec
from procedure.graph import TransitionGraph
from service import protocol
from service.protocol import MessageKind


@dataclass
class GraphRegistry:
    """Graphs the server accepts, keyed by content hash, each with its default spec set."""
    entries: Dict[str, Tuple[TransitionGraph, List[InterventionSpec]]] = field(default_factory=dict)

    def register(self, graph: TransitionGraph, specs: Sequence[InterventionSpec]) -> str:
        self.entries[graph.graph_hash] = (graph, list(specs))
        logging.info(f"Registered graph {graph.graph_hash[:12]} ({graph.n_steps} steps, {len(specs)} specs)")
        return graph.graph_hash

    def lookup(self, graph_hash: str) -> Tuple[TransitionGraph, List[InterventionSpec]]:
        try:
            return self.entries[graph_hash]
        except KeyError:
            raise ProtocolError(protocol.GRAPH_MISMATCH, f"unknown graph hash {graph_hash!r}") from None


class StepwatchServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    # non-daemon handler threads: server_close() waits for in-flight sessions
    daemon_threads = False
    block_on_close = True

    def __init__(self, address: Tuple[str, int], registry: GraphRegistry, engine_cfg: EngineConfig,
                 emit_ticks: bool = False):
        super().__init__(address, SessionHandler)
        self.registry = registry
        self.engine_cfg = engine_cfg
        self.emit_ticks = emit_ticks
        self._counter_lock = threading.Lock()
        self._connections = 0

    def next_session_id(self) -> str:
        with self._counter_lock:
            self._connections += 1
            return f"conn-{self._connections:04d}"


class SessionHandler(socketserver.StreamRequestHandler):
    server: StepwatchServer

    def _send(self, data: bytes) -> None:
        self.wfile.write(data)
        self.wfile.flush()

    def _read(self) -> Optional[dict]:
        line = self.rfile.readline(settings.MAX_MESSAGE_BYTES + 1)
        if not line:
            return None
        if not line.endswith(b"\n") and len(line) > settings.MAX_MESSAGE_BYTES:
            raise ProtocolError(protocol.TOO_LARGE, f"message exceeds {settings.MAX_MESSAGE_BYTES} bytes")
        return protocol.decode_message(line)

    def _open_session(self) -> Optional[SessionEngine]:
        hello = self._read()
        if hello is None:
            return None
        if hello["kind"] is not MessageKind.HELLO:
            raise ProtocolError(protocol.UNEXPECTED, f"expected hello, got {hello['kind'].value}")
        self.session_id = hello["session"] or self.server.next_session_id()
        graph, default_specs = self.server.registry.lookup(str(hello.get("graph_hash", "")))
        specs = protocol.specs_from_hello(hello)
        try:
            engine = SessionEngine(graph, default_specs if specs is None else specs, self.server.engine_cfg,
                                   session_id=self.session_id)
        except PolicyError as e:
            raise ProtocolError(protocol.BAD_SPECS, str(e)) from None
        logging.info(f"Session {self.session_id} opened from {self.client_address[0]} "
                     f"(graph {graph.graph_hash[:12]}, {len(engine.specs)} specs)")
        return engine

    def handle(self) -> None:
        self.session_id = ""
        latencies: List[float] = []
        try:
            engine = self._open_session()
            if engine is None:
                return
            while True:
                record = self._read()
                if record is None:
                    logging.warning(f"Session {self.session_id} aborted: client disconnected before bye")
                    return
                if record["kind"] is MessageKind.BYE:
                    for event in engine.finish():
                        self._send(protocol.event_message(self.session_id, event))
                    self._send(protocol.encode_message(MessageKind.BYE, self.session_id,
                                                       **_closing_stats(engine, latencies)))
                    logging.info(f"Session {self.session_id} closed: {engine.frames_seen} frames, "
                                 f"{len(engine.events)} interventions")
                    return
                if record["kind"] is not MessageKind.FRAME:
                    raise ProtocolError(protocol.UNEXPECTED, f"unexpected {record['kind'].value} message")
                self._process_frame(engine, record, latencies)
        except ProtocolError as e:
            logging.warning(f"Session {self.session_id or '-'}: {e}")
            self._try_send(protocol.error_message(self.session_id, e.code, str(e)))
        except (ConnectionError, OSError) as e:
            logging.warning(f"Session {self.session_id or '-'} aborted: {e}")

    def _process_frame(self, engine: SessionEngine, record: dict, latencies: List[float]) -> None:
        frame = protocol.frame_from_message(record)
        if frame.t <= engine.belief.t + 1e-6:
            raise ProtocolError(protocol.OUT_OF_ORDER, f"frame t={frame.t} does not follow t={engine.belief.t}")
        started = time.perf_counter()
        ticks_before = len(engine.tick_log)
        try:
            fired = engine.feed(frame)
        except ObservationError as e:
            raise ProtocolError(protocol.MALFORMED, str(e)) from None
        latencies.append(time.perf_counter() - started)
        for event in fired:
            self._send(protocol.event_message(self.session_id, event))
        if self.server.emit_ticks and len(engine.tick_log) > ticks_before:
            tick = engine.tick_log[-1]
            self._send(protocol.encode_message(MessageKind.TICK, self.session_id, t=tick["t"],
                                               decoded_step=tick["decoded_step"], targets=tick["targets"]))

    def _try_send(self, data: bytes) -> None:
        try:
            self._send(data)
        except OSError:
            pass


def _closing_stats(engine: SessionEngine, latencies: Sequence[float]) -> dict:
    stats = {"frames": engine.frames_seen, "events": len(engine.events),
             "latency_p50_s": None, "latency_p99_s": None}
    if latencies:
        stats["latency_p50_s"] = float(np.percentile(latencies, 50))
        stats["latency_p99_s"] = float(np.percentile(latencies, 99))
    return stats


def start_server(registry: GraphRegistry, engine_cfg: EngineConfig, host: str = settings.SERVICE_HOST,
                 port: int = settings.SERVICE_PORT, emit_ticks: bool = False) -> Tuple[StepwatchServer, threading.Thread]:
    """Start serving in a background thread; port 0 picks a free port (see server.server_address)."""
    server = StepwatchServer((host, port), registry, engine_cfg, emit_ticks=emit_ticks)
    thread = threading.Thread(target=server.serve_forever, name="stepwatch-server", daemon=True)
    thread.start()
    logging.info(f"Serving on {server.server_address[0]}:{server.server_address[1]} (preset {engine_cfg.name})")
    return server, thread


def stop_server(server: StepwatchServer, thread: threading.Thread) -> None:
    server.shutdown()
    server.server_close()
    thread.join()
    logging.info("Server stopped")


def serve(registry: GraphRegistry, engine_cfg: EngineConfig, host: str = settings.SERVICE_HOST,
          port: int = settings.SERVICE_PORT, emit_ticks: bool = False) -> None:
    """Serve until interrupted; in-flight sessions are drained on shutdown."""
    server, thread = start_server(registry, engine_cfg, host, port, emit_ticks)
    try:
        while thread.is_alive():
            thread.join(timeout=0.5)
    except KeyboardInterrupt:
        logging.info("Shutdown requested")
    finally:
        stop_server(server, thread)
