"""Replay client: streams a recorded frame file to the server at a chosen speed."""
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config import settings
from core.errors import ProtocolError
from policy.intervention import InterventionEvent, InterventionSpec
from service import protocol
from service.protocol import MessageKind
from tracker.tracker import FrameObservation

CONNECT_TIMEOUT_S = 5.0
BYE_TIMEOUT_S = 30.0


@dataclass
class ReplayResult:
    status: int
    events: List[InterventionEvent] = field(default_factory=list)
    # (client seconds since connect, decoded message) for everything received
    transcript: List[Tuple[float, Dict[str, Any]]] = field(default_factory=list)
    bye: Optional[Dict[str, Any]] = None
    error: Optional[str] = None


class _Reader(threading.Thread):
    def __init__(self, sock: socket.socket, result: ReplayResult, started: float):
        super().__init__(name="replay-reader", daemon=True)
        self.stream = sock.makefile('rb')
        self.result = result
        self.started = started
        self.finished = threading.Event()

    def run(self) -> None:
        try:
            while True:
                line = self.stream.readline(settings.MAX_MESSAGE_BYTES + 1)
                if not line:
                    break
                record = protocol.decode_message(line)
                self.result.transcript.append((time.monotonic() - self.started, record))
                kind = record["kind"]
                if kind is MessageKind.EVENT:
                    event = protocol.event_from_message(record)
                    self.result.events.append(event)
                    logging.info(f"[{event.t:7.1f}s] {event.message}")
                elif kind is MessageKind.ERROR:
                    self.result.error = f"{record.get('code')}: {record.get('message')}"
                    break
                elif kind is MessageKind.BYE:
                    self.result.bye = record
                    break
        except (OSError, ProtocolError) as e:
            self.result.error = self.result.error or str(e)
        finally:
            self.finished.set()


def replay(frames: Sequence[FrameObservation], graph_hash: str, host: str = settings.SERVICE_HOST,
           port: int = settings.SERVICE_PORT, speed: float = 1.0, session: str = "",
           specs: Optional[Sequence[InterventionSpec]] = None) -> ReplayResult:
    """Send hello, the frames paced at frame time / speed (0 = as fast as possible), then bye."""
    if speed < 0:
        raise ValueError("speed must be non-negative")
    result = ReplayResult(status=1)
    try:
        sock = socket.create_connection((host, port), timeout=CONNECT_TIMEOUT_S)
    except OSError as e:
        result.error = f"cannot connect to {host}:{port}: {e}"
        logging.error(result.error)
        return result
    sock.settimeout(None)
    started = time.monotonic()
    reader = _Reader(sock, result, started)
    reader.start()
    try:
        sock.sendall(protocol.hello_message(session, graph_hash, specs))
        for frame in frames:
            if reader.finished.is_set():
                break
            if speed > 0:
                delay = started + frame.t / speed - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            sock.sendall(protocol.frame_message(session, frame))
        if not reader.finished.is_set():
            sock.sendall(protocol.encode_message(MessageKind.BYE, session))
        reader.finished.wait(BYE_TIMEOUT_S)
    except OSError as e:
        result.error = result.error or f"connection dropped: {e}"
    finally:
        try:
            sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        sock.close()
        reader.join(timeout=1.0)

    if result.bye is not None and result.error is None:
        result.status = 0
    else:
        logging.error(f"Replay of {session or '-'} failed: {result.error or 'no bye from server'}")
    return result
