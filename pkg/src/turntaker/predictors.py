"""Sources of VapFrames and TurnShiftEstimates.

* ``ScriptedPredictor`` replays a fixed trace.
* ``heuristic_p_ts`` is a cue-list stand-in for a lexical turn-completion model.
* The bridge functions speak the wire protocol of external model servers:
  binary audio requests and JSON-line predictions for the acoustic model,
  JSON lines both ways for the turn-completion model.
"""

from __future__ import annotations

import json
import math
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Callable, Sequence

from .model import Speaker, TurnShiftEstimate, VapFrame

# ---------------------------------------------------------------------------
# Scripted predictor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictorScript:
    frames: tuple[VapFrame, ...] = ()
    estimates: tuple[TurnShiftEstimate, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "estimates", tuple(self.estimates))

    def validate(self, frame_period_ms: int = 100, tolerance_ms: int = 1) -> None:
        for earlier, later in zip(self.frames, self.frames[1:]):
            if later.t <= earlier.t:
                raise ValueError(f"frames not strictly increasing at t={later.t}")
            if abs(later.t - earlier.t - frame_period_ms) > tolerance_ms:
                raise ValueError(f"frame cadence broken between t={earlier.t} and t={later.t}")
        for earlier, later in zip(self.estimates, self.estimates[1:]):
            if later.t < earlier.t:
                raise ValueError(f"estimates not monotone at t={later.t}")


class ScriptedPredictor:
    """Hands out scripted items with timestamp <= t, each exactly once.

    Frames and estimates are merged by timestamp; on ties the frame comes
    first, matching the engine's input ordering.
    """

    def __init__(self, script: PredictorScript):
        self._items = sorted(
            [(f.t, 0, i, f) for i, f in enumerate(script.frames)]
            + [(e.t, 1, i, e) for i, e in enumerate(script.estimates)],
            key=lambda item: item[:3],
        )
        self._cursor = 0
        self._last_query: int | None = None

    def scripted_next(self, t: int) -> VapFrame | TurnShiftEstimate | None:
        if self._last_query is not None and t < self._last_query:
            raise ValueError(f"query time went backwards: {t} < {self._last_query}")
        self._last_query = t
        if self._cursor < len(self._items) and self._items[self._cursor][0] <= t:
            item = self._items[self._cursor][3]
            self._cursor += 1
            return item
        return None

    def drain(self, t: int) -> list[VapFrame | TurnShiftEstimate]:
        out = []
        while (item := self.scripted_next(t)) is not None:
            out.append(item)
        return out

    @property
    def exhausted(self) -> bool:
        return self._cursor >= len(self._items)


def scripted_next(predictor: ScriptedPredictor, t: int) -> VapFrame | TurnShiftEstimate | None:
    return predictor.scripted_next(t)


# ---------------------------------------------------------------------------
# Heuristic turn-completion probability
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CueLists:
    continuation: frozenset[str]
    terminal: frozenset[str]
    terminal_punctuation: tuple[str, ...] = ("?", ".", "!")
    continuation_value: float = 0.05
    terminal_value: float = 0.8
    neutral_value: float = 0.4
    empty_value: float = 0.0

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CueLists":
        values = data.get("values", {})
        return cls(
            continuation=frozenset(w.lower() for w in data["continuation"]),
            terminal=frozenset(w.lower() for w in data["terminal"]),
            terminal_punctuation=tuple(data.get("terminal_punctuation", ("?", ".", "!"))),
            continuation_value=values.get("continuation", 0.05),
            terminal_value=values.get("terminal", 0.8),
            neutral_value=values.get("neutral", 0.4),
            empty_value=values.get("empty", 0.0),
        )


@lru_cache(maxsize=1)
def default_cues() -> CueLists:
    text = resources.files("turntaker").joinpath("data/cues.json").read_text(encoding="utf-8")
    return CueLists.from_dict(json.loads(text))


def heuristic_p_ts(transcript: str, cues: CueLists | None = None) -> float:
    """Turn-completion probability from the transcript's last word."""
    cues = cues or default_cues()
    stripped = transcript.strip()
    if not stripped:
        return cues.empty_value
    if stripped.endswith(cues.terminal_punctuation):
        return cues.terminal_value
    last = stripped.split()[-1].lower().strip(",;:\"'()")
    if last in cues.continuation:
        return cues.continuation_value
    if last in cues.terminal:
        return cues.terminal_value
    return cues.neutral_value


# ---------------------------------------------------------------------------
# Wire protocol
# ---------------------------------------------------------------------------

MAGIC = b"VAPF"
HEADER = struct.Struct(">4sQI")


class ProtocolError(ValueError):
    """Malformed bridge message. ``position`` is a byte or character offset when known."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        suffix = f" (at position {position})" if position is not None else ""
        super().__init__(message + suffix)


@dataclass(frozen=True)
class BridgeConfig:
    endpoint: str = "127.0.0.1:8765"
    context_window_ms: int = 30_000
    sample_rate: int = 16_000
    channels: int = 2
    sample_width: int = 2
    timeout_ms: int = 80
    frame_period_ms: int = 100

    def __post_init__(self) -> None:
        if self.context_window_ms <= 0:
            raise ValueError("context_window_ms must be > 0")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.channels != 2:
            raise ValueError("the acoustic model takes exactly two channels (user, robot)")
        if self.sample_width not in (1, 2, 3, 4) or self.sample_rate <= 0 or self.frame_period_ms <= 0:
            raise ValueError("invalid sample format")

    @property
    def channel_bytes(self) -> int:
        """Bytes per channel for one frame period of audio."""
        samples = self.sample_rate * self.frame_period_ms // 1000
        return samples * self.sample_width

    def address(self) -> tuple[str, int]:
        host, _, port = self.endpoint.rpartition(":")
        return host or "127.0.0.1", int(port)


def encode_vap_request(user: bytes, robot: bytes, t: int, config: BridgeConfig | None = None) -> bytes:
    """Header (magic, timestamp, payload length) followed by interleaved stereo samples, user first."""
    config = config or BridgeConfig()
    width = config.sample_width
    if len(user) != len(robot):
        raise ValueError(f"channel lengths differ: user {len(user)} B, robot {len(robot)} B")
    if not user:
        raise ValueError("empty audio payload")
    if len(user) != config.channel_bytes:
        raise ValueError(f"expected {config.channel_bytes} B per channel for one frame, got {len(user)}")
    if t < 0:
        raise ValueError("negative timestamp")
    payload = bytearray(2 * len(user))
    for k in range(width):
        payload[k :: 2 * width] = user[k::width]
        payload[width + k :: 2 * width] = robot[k::width]
    return HEADER.pack(MAGIC, t, len(payload)) + bytes(payload)


def decode_vap_request(data: bytes, config: BridgeConfig | None = None) -> tuple[int, bytes, bytes]:
    """Inverse of ``encode_vap_request``: ``(t, user, robot)``."""
    config = config or BridgeConfig()
    width = config.sample_width
    if len(data) < HEADER.size:
        raise ProtocolError("truncated header", len(data))
    magic, t, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", 0)
    payload = data[HEADER.size :]
    if len(payload) != length:
        raise ProtocolError(f"payload length {len(payload)} does not match header {length}", 12)
    if length % (2 * width):
        raise ProtocolError("payload is not a whole number of stereo samples", HEADER.size)
    user = bytearray(length // 2)
    robot = bytearray(length // 2)
    for k in range(width):
        user[k::width] = payload[k :: 2 * width]
        robot[k::width] = payload[width + k :: 2 * width]
    return t, bytes(user), bytes(robot)


_RESPONSE_KEYS = {"t": int, "p_now": float, "p_future": float, "vad_user": bool, "vad_robot": bool}


def _parse_line(data: bytes | str) -> tuple[dict[str, Any], str]:
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    else:
        text = data
    text = text.rstrip("\r\n")
    if "\n" in text:
        raise ProtocolError("more than one line", text.index("\n"))
    try:
        record = json.loads(text, parse_constant=lambda c: _reject_constant(c, text))
    except json.JSONDecodeError as exc:
        raise ProtocolError(exc.msg, exc.pos) from None
    except RecursionError:
        raise ProtocolError("nesting too deep", 0) from None
    if not isinstance(record, dict):
        raise ProtocolError("expected a JSON object", 0)
    return record, text


def _reject_constant(constant: str, text: str):
    raise ProtocolError(f"non-finite number {constant}", text.find(constant))


def _key_position(text: str, key: str) -> int | None:
    pos = text.find(f'"{key}"')
    return pos if pos >= 0 else None


def decode_vap_response(data: bytes | str) -> VapFrame:
    """Parse one prediction line ``{"t":..,"p_now":..,"p_future":..,"vad_user":..,"vad_robot":..}``."""
    record, text = _parse_line(data)
    unknown = sorted(set(record) - set(_RESPONSE_KEYS))
    if unknown:
        raise ProtocolError(f"unknown key {unknown[0]!r}", _key_position(text, unknown[0]))
    values: dict[str, Any] = {}
    for key, kind in _RESPONSE_KEYS.items():
        if key not in record:
            raise ProtocolError(f"missing key {key!r}", len(text))
        value = record[key]
        ok = (
            isinstance(value, bool)
            if kind is bool
            else isinstance(value, int) and not isinstance(value, bool)
            if kind is int
            else isinstance(value, (int, float)) and not isinstance(value, bool)
        )
        if not ok:
            raise ProtocolError(f"{key} must be {kind.__name__}", _key_position(text, key))
        if kind is float:
            value = float(value)
            if not (math.isfinite(value) and 0.0 <= value <= 1.0):
                raise ProtocolError(f"{key}={value} outside [0, 1]", _key_position(text, key))
        if kind is int and value < 0:
            raise ProtocolError("negative timestamp", _key_position(text, key))
        values[key] = value
    return VapFrame(**values)


def encode_vap_response(frame: VapFrame) -> bytes:
    record = {
        "t": frame.t,
        "p_now": frame.p_now,
        "p_future": frame.p_future,
        "vad_user": frame.vad_user,
        "vad_robot": frame.vad_robot,
    }
    return (json.dumps(record, separators=(",", ":")) + "\n").encode("utf-8")


def encode_ts_request(context: Sequence[tuple[Speaker, str]], transcript: str) -> bytes:
    record = {
        "type": "ts",
        "context": [{"speaker": Speaker(s).value, "text": text} for s, text in context],
        "transcript": transcript,
    }
    return (json.dumps(record, separators=(",", ":")) + "\n").encode("utf-8")


def decode_ts_request(data: bytes | str) -> tuple[list[tuple[Speaker, str]], str]:
    record, text = _parse_line(data)
    if record.get("type") != "ts":
        raise ProtocolError("type must be 'ts'", _key_position(text, "type"))
    try:
        context = [(Speaker(item["speaker"]), str(item["text"])) for item in record["context"]]
        transcript = record["transcript"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed request: {exc}", None) from None
    if not isinstance(transcript, str):
        raise ProtocolError("transcript must be a string", _key_position(text, "transcript"))
    return context, transcript


def decode_ts_response(data: bytes | str) -> float:
    record, text = _parse_line(data)
    if set(record) != {"p_ts"}:
        raise ProtocolError("expected exactly the key 'p_ts'", 0)
    value = record["p_ts"]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
        raise ProtocolError(f"p_ts={value!r} outside [0, 1]", _key_position(text, "p_ts"))
    return float(value)


def encode_ts_response(p_ts: float) -> bytes:
    if not 0.0 <= p_ts <= 1.0:
        raise ValueError(f"p_ts {p_ts} outside [0, 1]")
    return (json.dumps({"p_ts": p_ts}) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------


class _LineClient:
    def __init__(self, config: BridgeConfig, sock: socket.socket | None = None):
        self.config = config
        self._sock = sock or socket.create_connection(config.address(), timeout=config.timeout_ms / 1000)
        self._sock.settimeout(config.timeout_ms / 1000)
        self._buffer = b""

    def _read_line(self) -> bytes | None:
        """One response line, or None when the request timeout elapses first."""
        while b"\n" not in self._buffer:
            try:
                chunk = self._sock.recv(4096)
            except (socket.timeout, TimeoutError):
                return None
            if not chunk:
                raise ConnectionError("bridge server closed the connection")
            self._buffer += chunk
        line, _, self._buffer = self._buffer.partition(b"\n")
        return line

    def close(self) -> None:
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class VapBridgeClient(_LineClient):
    """Sends one frame period of stereo audio per request.

    A reply that misses the timeout is replaced by the previous frame's
    values, flagged ``stale``. Late replies are discarded by timestamp.
    """

    def __init__(self, config: BridgeConfig | None = None, sock: socket.socket | None = None):
        super().__init__(config or BridgeConfig(), sock)
        self.previous: VapFrame | None = None

    def request(self, user: bytes, robot: bytes, t: int) -> VapFrame:
        self._sock.sendall(encode_vap_request(user, robot, t, self.config))
        while True:
            line = self._read_line()
            if line is None:
                return self._stale(t)
            frame = decode_vap_response(line)
            if frame.t == t:
                self.previous = frame
                return frame

    def _stale(self, t: int) -> VapFrame:
        prev = self.previous
        if prev is None:
            return VapFrame(t, 0.5, 0.5, False, False, stale=True)
        return VapFrame(t, prev.p_now, prev.p_future, prev.vad_user, prev.vad_robot, stale=True)


class TurnShiftBridgeClient(_LineClient):
    def __init__(self, config: BridgeConfig | None = None, sock: socket.socket | None = None):
        super().__init__(config or BridgeConfig(), sock)
        self.previous = 0.0

    def request(self, context: Sequence[tuple[Speaker, str]], transcript: str, t: int) -> TurnShiftEstimate:
        """On timeout the previous estimate is reused."""
        self._sock.sendall(encode_ts_request(context, transcript))
        line = self._read_line()
        if line is not None:
            self.previous = decode_ts_response(line)
        return TurnShiftEstimate(t, transcript, self.previous)


# ---------------------------------------------------------------------------
# Loopback servers (tests and local experiments)
# ---------------------------------------------------------------------------


@dataclass
class LoopbackServer:
    """Threaded TCP server on an ephemeral port.

    ``mode="echo"`` returns every received byte unchanged. ``mode="vap"``
    parses audio requests and answers with ``model(t, user, robot)``;
    ``mode="ts"`` answers turn-completion requests with ``model(context, transcript)``.
    """

    mode: str = "echo"
    model: Callable[..., Any] | None = None
    config: BridgeConfig = field(default_factory=BridgeConfig)
    delay_s: float = 0.0

    def __post_init__(self) -> None:
        outer = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                outer._serve(self.request)

        self._server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), Handler)
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def __enter__(self) -> "LoopbackServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()

    def _serve(self, conn: socket.socket) -> None:
        reader = conn.makefile("rb")
        try:
            while True:
                if self.mode == "echo":
                    chunk = conn.recv(65536)
                    if not chunk:
                        return
                    conn.sendall(chunk)
                elif self.mode == "vap":
                    header = reader.read(HEADER.size)
                    if len(header) < HEADER.size:
                        return
                    _, _, length = HEADER.unpack(header)
                    t, user, robot = decode_vap_request(header + reader.read(length), self.config)
                    frame = self.model(t, user, robot)
                    if self.delay_s:
                        time.sleep(self.delay_s)
                    conn.sendall(encode_vap_response(frame))
                else:
                    line = reader.readline()
                    if not line:
                        return
                    context, transcript = decode_ts_request(line)
                    conn.sendall(encode_ts_response(self.model(context, transcript)))
        except (ConnectionError, OSError):
            return
