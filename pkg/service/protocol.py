"""Wire format shared by the server and the replay client.

One JSON object per line, at most MAX_MESSAGE_BYTES including the newline:

    {"kind": "hello", "session": "<id>", "graph_hash": "<sha256>", "specs": [<spec>, ...]}
    {"kind": "frame", "session": "<id>", "t": 0.2, "probs": [p_1, ..., p_N(, p_bg)]}
    {"kind": "event", "session": "<id>", "t": 31.0, "target": 3, "kind_of": "remind-in-advance", "message": "..."}
    {"kind": "tick",  "session": "<id>", "t": 3.0, "decoded_step": 1, "targets": {"3": {"E": .., "H": .., "phase": ..}}}
    {"kind": "bye",   "session": "<id>", "frames": 120, "events": 1, "latency_p50_s": .., "latency_p99_s": ..}
    {"kind": "error", "session": "<id>", "code": "graph-mismatch", "message": "..."}

`specs` in hello is optional; without it the server's default spec set applies.
Timestamp gaps between frames are allowed (muted sensors); going backwards is not.
"""
import json
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import settings
from core.errors import ObservationError, PolicyError, ProtocolError
from policy.intervention import InterventionEvent, InterventionKind, InterventionSpec
from tracker.tracker import FrameObservation

MALFORMED = "malformed"
TOO_LARGE = "too-large"
GRAPH_MISMATCH = "graph-mismatch"
OUT_OF_ORDER = "out-of-order"
UNEXPECTED = "unexpected-message"
BAD_SPECS = "bad-specs"


class MessageKind(str, Enum):
    HELLO = "hello"
    FRAME = "frame"
    EVENT = "event"
    TICK = "tick"
    BYE = "bye"
    ERROR = "error"


def encode_message(kind: MessageKind, session: str, **payload: Any) -> bytes:
    record = {"kind": MessageKind(kind).value, "session": session}
    record.update(payload)
    data = (json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n").encode('utf-8')
    if len(data) > settings.MAX_MESSAGE_BYTES:
        raise ProtocolError(TOO_LARGE, f"{kind} message of {len(data)} bytes exceeds {settings.MAX_MESSAGE_BYTES}")
    return data


def decode_message(line: bytes) -> Dict[str, Any]:
    if len(line) > settings.MAX_MESSAGE_BYTES:
        raise ProtocolError(TOO_LARGE, f"message of {len(line)} bytes exceeds {settings.MAX_MESSAGE_BYTES}")
    try:
        record = json.loads(line.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(MALFORMED, f"not a JSON line: {e}") from None
    if not isinstance(record, dict) or "kind" not in record:
        raise ProtocolError(MALFORMED, "message must be an object with a 'kind' field")
    try:
        record["kind"] = MessageKind(record["kind"])
    except ValueError:
        raise ProtocolError(MALFORMED, f"unknown message kind {record['kind']!r}") from None
    record.setdefault("session", "")
    return record


def hello_message(session: str, graph_hash: str, specs: Optional[Sequence[InterventionSpec]] = None) -> bytes:
    payload: Dict[str, Any] = {"graph_hash": graph_hash}
    if specs is not None:
        payload["specs"] = [spec.to_dict() for spec in specs]
    return encode_message(MessageKind.HELLO, session, **payload)


def frame_message(session: str, frame: FrameObservation) -> bytes:
    return encode_message(MessageKind.FRAME, session, t=float(frame.t), probs=[float(p) for p in frame.probs])


def event_message(session: str, event: InterventionEvent) -> bytes:
    return encode_message(MessageKind.EVENT, session, t=round(event.t, 6), target=event.target,
                          kind_of=event.kind.value, message=event.message)


def error_message(session: str, code: str, message: str) -> bytes:
    return encode_message(MessageKind.ERROR, session, code=code, message=message)


def frame_from_message(record: Dict[str, Any]) -> FrameObservation:
    try:
        return FrameObservation(t=float(record["t"]), probs=np.asarray(record["probs"], dtype=float))
    except (KeyError, TypeError, ValueError, ObservationError) as e:
        raise ProtocolError(MALFORMED, f"bad frame: {e}") from None


def event_from_message(record: Dict[str, Any]) -> InterventionEvent:
    try:
        return InterventionEvent(t=float(record["t"]), target=int(record["target"]),
                                 kind=InterventionKind(record["kind_of"]), message=str(record["message"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ProtocolError(MALFORMED, f"bad event: {e}") from None


def specs_from_hello(record: Dict[str, Any]) -> Optional[List[InterventionSpec]]:
    if "specs" not in record:
        return None
    if not isinstance(record["specs"], list):
        raise ProtocolError(BAD_SPECS, "hello 'specs' must be a list")
    try:
        return [InterventionSpec.from_dict(item) for item in record["specs"]]
    except (PolicyError, TypeError) as e:
        raise ProtocolError(BAD_SPECS, str(e)) from None
