"""Shared event vocabulary, engine configuration, dialogue records and the
line-oriented log codec used by the simulator, the CLI and the metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Iterable, Iterator, Sequence, Union


class Speaker(str, Enum):
    USER = "User"
    ROBOT = "Robot"


class Policy(str, Enum):
    PROPOSED = "proposed"
    BASELINE = "baseline"


class ConfigError(ValueError):
    """Raised for an invalid EngineConfig; the message names the field."""


class LogFormatError(ValueError):
    """A log line could not be decoded."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


# ---------------------------------------------------------------------------
# Input events
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VapFrame:
    """One acoustic prediction sample.

    ``p_now`` / ``p_future`` are the probabilities that the user is the
    dominant speaker in [t, t+600 ms) and [t+600 ms, t+2000 ms).
    """

    t: int
    p_now: float
    p_future: float
    vad_user: bool
    vad_robot: bool
    stale: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_now <= 1.0 and 0.0 <= self.p_future <= 1.0):
            raise ValueError(f"probabilities outside [0, 1] at t={self.t}")


class AsrKind(str, Enum):
    PARTIAL = "Partial"
    FINAL = "Final"


@dataclass(frozen=True)
class AsrEvent:
    t: int
    kind: AsrKind
    transcript: str

    @property
    def final(self) -> bool:
        return self.kind is AsrKind.FINAL


@dataclass(frozen=True)
class TurnShiftEstimate:
    t: int
    transcript: str
    p_ts: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_ts <= 1.0:
            raise ValueError(f"p_ts {self.p_ts} outside [0, 1] at t={self.t}")


@dataclass(frozen=True)
class TtsWordEvent:
    t: int
    utterance_id: str
    index: int
    word: str
    t_start: int
    t_end: int


@dataclass(frozen=True)
class PreparedReady:
    t: int
    handle_id: str
    response_text: str


@dataclass(frozen=True)
class Tick:
    t: int


InputEvent = Union[VapFrame, AsrEvent, TurnShiftEstimate, TtsWordEvent, PreparedReady, Tick]

# Tie-break order for inputs sharing a timestamp.
KIND_PRIORITY: dict[type, int] = {
    VapFrame: 0,
    AsrEvent: 1,
    TurnShiftEstimate: 2,
    TtsWordEvent: 3,
    PreparedReady: 4,
    Tick: 5,
}


# ---------------------------------------------------------------------------
# Engine decisions
# ---------------------------------------------------------------------------


class Decision(str, Enum):
    TURN_SHIFT_ALLOWED = "TurnShiftAllowed"
    TAKE_TURN = "TakeTurn"
    STOP_AT_WORD_BOUNDARY = "StopAtWordBoundary"
    CONTINUE_OVERLAP = "ContinueOverlap"
    PREPARE_REQUEST = "PrepareRequest"
    PREPARE_CANCEL = "PrepareCancel"
    BACKCHANNEL_OPPORTUNITY = "BackchannelOpportunity"
    GAZE_AVERT = "GazeAvert"
    GAZE_RETURN = "GazeReturn"
    LISTENING_LIGHT = "ListeningLight"


@dataclass(frozen=True)
class EngineEvent:
    """A decision emitted by the engine.

    Only the fields relevant to ``kind`` are set; see ``DECISION_FIELDS``.
    """

    t: int
    kind: Decision
    utterance_id: str | None = None
    last_spoken_index: int | None = None
    handle_id: str | None = None
    context_snapshot: str | None = None
    on: bool | None = None

    def payload(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in DECISION_FIELDS[self.kind]}


DECISION_FIELDS: dict[Decision, tuple[str, ...]] = {
    Decision.TURN_SHIFT_ALLOWED: (),
    Decision.TAKE_TURN: ("utterance_id",),
    Decision.STOP_AT_WORD_BOUNDARY: ("utterance_id", "last_spoken_index"),
    Decision.CONTINUE_OVERLAP: (),
    Decision.PREPARE_REQUEST: ("handle_id", "context_snapshot"),
    Decision.PREPARE_CANCEL: ("handle_id",),
    Decision.BACKCHANNEL_OPPORTUNITY: (),
    Decision.GAZE_AVERT: (),
    Decision.GAZE_RETURN: (),
    Decision.LISTENING_LIGHT: ("on",),
}


# ---------------------------------------------------------------------------
# Ground-truth and session metadata records (simulator output only)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UserSegment:
    """A user speech segment as it actually happened in a simulated dialogue."""

    t: int
    t_end: int
    transcript: str
    boundary: str  # "Hold" | "Yield" | "Backchannel"


@dataclass(frozen=True)
class RobotOnset:
    """Ground-truth label for one robot speech onset."""

    t: int
    utterance_id: str
    label: str  # "clean" | "interruption"


@dataclass(frozen=True)
class Session:
    """First record of every simulator log; enough to replay it."""

    t: int
    policy: str
    scenario_id: str
    corpus_id: str
    seed: int
    baseline_silence_ms: int
    config: str  # compact JSON of the EngineConfig


# ---------------------------------------------------------------------------
# Dialogue record
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DialogueTurn:
    speaker: Speaker
    planned_text: str
    spoken_word_count: int
    t_start: int
    t_end: int

    def __post_init__(self) -> None:
        n = len(self.planned_text.split())
        if not 0 <= self.spoken_word_count <= n:
            raise ValueError(f"spoken_word_count {self.spoken_word_count} outside [0, {n}]")
        if self.speaker is Speaker.USER and self.spoken_word_count != n:
            raise ValueError("user turns are always fully spoken")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

DEFAULT_TIMEOUT_SCHEDULE: tuple[tuple[float, int], ...] = ((0.6, 1000), (0.3, 2000))


@dataclass(frozen=True)
class EngineConfig:
    """Every tunable of the turn-taking engine.

    ``timeout_schedule`` lists ``(min_p_ts, timeout_ms)`` steps; a p_ts below
    every step gets ``max_timeout_ms``.
    """

    favor_threshold: float = 0.5
    dual_favor_min_ms: int = 500
    max_timeout_ms: int = 3000
    timeout_schedule: tuple[tuple[float, int], ...] = DEFAULT_TIMEOUT_SCHEDULE
    prep_prob_threshold: float = 0.2
    prep_partial_gap_ms: int = 200
    similarity_threshold: float = 0.8
    interrupt_confirm_ms: int = 200
    frame_period_ms: int = 100
    take_turn_requires_user_silence: bool = True
    # "robot": both predictions must favor the party that does not hold the
    # floor. "user": the literal reading, both favor the floor holder.
    yield_polarity: str = "robot"
    # When false the dual-favor run only counts frames where the user is
    # silent, so the shortest response is dual_favor_min_ms after speech end.
    dual_favor_clock_during_speech: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "timeout_schedule",
            tuple(sorted(((float(p), int(ms)) for p, ms in self.timeout_schedule), reverse=True)),
        )
        self.validate()

    def validate(self) -> None:
        for name in ("favor_threshold", "prep_prob_threshold", "similarity_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        for name in (
            "dual_favor_min_ms",
            "max_timeout_ms",
            "prep_partial_gap_ms",
            "interrupt_confirm_ms",
            "frame_period_ms",
        ):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer duration, got {value!r}")
        previous_ms = 0
        for p, ms in reversed(self.timeout_schedule):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"timeout_schedule threshold {p} outside [0, 1]")
            if ms <= 0 or ms > self.max_timeout_ms:
                raise ConfigError(f"timeout_schedule value {ms} must be in (0, max_timeout_ms]")
            if previous_ms and ms > previous_ms:
                raise ConfigError("timeout_schedule must be non-increasing in p_ts")
            previous_ms = ms
        if self.yield_polarity not in ("robot", "user"):
            raise ConfigError(f"yield_polarity must be 'robot' or 'user', got {self.yield_polarity!r}")

    def timeout_for(self, p_ts: float) -> int:
        for threshold, ms in self.timeout_schedule:
            if p_ts >= threshold:
                return ms
        return self.max_timeout_ms

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["timeout_schedule"] = [[p, ms] for p, ms in self.timeout_schedule]
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        kwargs = dict(data)
        if "timeout_schedule" in kwargs:
            kwargs["timeout_schedule"] = tuple(tuple(step) for step in kwargs["timeout_schedule"])
        return cls(**kwargs)


def favors_user(p: float, threshold: float) -> bool:
    return p > threshold


def favors_robot(p: float, threshold: float) -> bool:
    return p < threshold


# ---------------------------------------------------------------------------
# Log codec
# ---------------------------------------------------------------------------

LogRecord = Union[InputEvent, EngineEvent, UserSegment, RobotOnset, Session]

_INPUT_KIND = {
    VapFrame: "VapFrame",
    TurnShiftEstimate: "TurnShiftEstimate",
    TtsWordEvent: "TtsWordEvent",
    PreparedReady: "PreparedReady",
    Tick: "Tick",
    UserSegment: "UserSegment",
    RobotOnset: "RobotOnset",
    Session: "Session",
}
_KIND_TYPE = {v: k for k, v in _INPUT_KIND.items()}

# key -> accepted python types
_FIELD_TYPES: dict[str, tuple[type, ...]] = {
    "t": (int,),
    "p_now": (int, float),
    "p_future": (int, float),
    "p_ts": (int, float),
    "vad_user": (bool,),
    "vad_robot": (bool,),
    "stale": (bool,),
    "transcript": (str,),
    "utterance_id": (str,),
    "index": (int,),
    "word": (str,),
    "t_start": (int,),
    "t_end": (int,),
    "handle_id": (str,),
    "response_text": (str,),
    "last_spoken_index": (int,),
    "context_snapshot": (str,),
    "on": (bool,),
    "boundary": (str,),
    "label": (str,),
    "policy": (str,),
    "scenario_id": (str,),
    "corpus_id": (str,),
    "seed": (int,),
    "baseline_silence_ms": (int,),
    "config": (str,),
}


def kind_of(record: LogRecord) -> str:
    if isinstance(record, EngineEvent):
        return record.kind.value
    if isinstance(record, AsrEvent):
        return "AsrFinal" if record.final else "AsrPartial"
    return _INPUT_KIND[type(record)]


def record_to_dict(record: LogRecord) -> dict[str, Any]:
    out: dict[str, Any] = {"t": record.t, "kind": kind_of(record)}
    if isinstance(record, EngineEvent):
        out.update(record.payload())
    elif isinstance(record, AsrEvent):
        out["transcript"] = record.transcript
    else:
        for f in fields(record):
            if f.name == "t":
                continue
            value = getattr(record, f.name)
            if f.name == "stale" and not value:
                continue
            out[f.name] = value
    return out


def encode_record(record: LogRecord) -> str:
    return json.dumps(record_to_dict(record), separators=(",", ":"), ensure_ascii=False)


def _check_type(key: str, value: Any, line_no: int | None) -> None:
    accepted = _FIELD_TYPES[key]
    ok = isinstance(value, accepted)
    if ok and bool not in accepted and isinstance(value, bool):
        ok = False
    if not ok:
        raise LogFormatError(f"field {key!r} has wrong type {type(value).__name__}", line_no)


def record_from_dict(data: dict[str, Any], line_no: int | None = None) -> LogRecord:
    if not isinstance(data, dict):
        raise LogFormatError("record is not an object", line_no)
    if "t" not in data or "kind" not in data:
        raise LogFormatError("record requires 't' and 'kind'", line_no)
    kind = data["kind"]
    if not isinstance(kind, str):
        raise LogFormatError("'kind' must be a string", line_no)
    if kind in ("AsrPartial", "AsrFinal"):
        expected: tuple[str, ...] = ("transcript",)
        optional: tuple[str, ...] = ()
    elif kind in _KIND_TYPE:
        cls = _KIND_TYPE[kind]
        names = [f.name for f in fields(cls) if f.name != "t"]
        optional = ("stale",) if cls is VapFrame else ()
        expected = tuple(n for n in names if n not in optional)
    else:
        try:
            decision = Decision(kind)
        except ValueError:
            raise LogFormatError(f"unknown kind {kind!r}", line_no) from None
        expected = DECISION_FIELDS[decision]
        optional = ()
    keys = set(data) - {"t", "kind"}
    unknown = keys - set(expected) - set(optional)
    if unknown:
        raise LogFormatError(f"unknown key(s) for {kind}: {', '.join(sorted(unknown))}", line_no)
    missing = set(expected) - keys
    if missing:
        raise LogFormatError(f"missing key(s) for {kind}: {', '.join(sorted(missing))}", line_no)
    for key in ("t", *keys):
        _check_type(key, data[key], line_no)
    if data["t"] < 0:
        raise LogFormatError("negative timestamp", line_no)
    values = {k: data[k] for k in keys}
    for key in ("p_now", "p_future", "p_ts"):
        if key in values:
            values[key] = float(values[key])
            if not 0.0 <= values[key] <= 1.0:
                raise LogFormatError(f"{key}={values[key]} outside [0, 1]", line_no)
    t = data["t"]
    if kind == "AsrPartial":
        return AsrEvent(t, AsrKind.PARTIAL, values["transcript"])
    if kind == "AsrFinal":
        return AsrEvent(t, AsrKind.FINAL, values["transcript"])
    if kind in _KIND_TYPE:
        return _KIND_TYPE[kind](t=t, **values)
    return EngineEvent(t=t, kind=Decision(kind), **values)


def decode_record(line: str, line_no: int | None = None) -> LogRecord:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"malformed JSON at column {exc.colno}: {exc.msg}", line_no) from None
    return record_from_dict(data, line_no)


def encode_log(records: Iterable[LogRecord]) -> str:
    return "".join(encode_record(r) + "\n" for r in records)


def decode_log(text: str) -> list[LogRecord]:
    # split on "\n" only: str.splitlines() also breaks at characters such as U+0085 inside transcripts
    return [decode_record(line.rstrip("\r"), i) for i, line in enumerate(text.split("\n"), start=1) if line.strip()]


def is_input(record: LogRecord) -> bool:
    return type(record) in KIND_PRIORITY


def iter_inputs(records: Iterable[LogRecord]) -> Iterator[InputEvent]:
    return (r for r in records if is_input(r))  # type: ignore[misc]


# ---------------------------------------------------------------------------
# Stream validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    index: int
    rule: str
    message: str


def validate_event_stream(
    log: Sequence[LogRecord], frame_period_ms: int = 100, tolerance_ms: int = 1
) -> list[Violation]:
    """Check a log for structural validity; violations are returned, not raised."""
    report: list[Violation] = []
    last_t: int | None = None
    last_frame_t: int | None = None
    partial_open = False
    words: dict[str, TtsWordEvent] = {}
    for i, rec in enumerate(log):
        if last_t is not None and rec.t < last_t:
            report.append(Violation(i, "non-monotone timestamp", f"t={rec.t} after t={last_t}"))
        last_t = rec.t if last_t is None else max(last_t, rec.t)
        if isinstance(rec, VapFrame):
            if last_frame_t is not None:
                gap = rec.t - last_frame_t
                if abs(gap - frame_period_ms) > tolerance_ms:
                    report.append(Violation(i, "frame cadence", f"frame gap {gap} ms"))
            last_frame_t = rec.t
        elif isinstance(rec, AsrEvent):
            if rec.final:
                if not partial_open:
                    report.append(Violation(i, "asr ordering", "Final without preceding Partial"))
                partial_open = False
            else:
                partial_open = True
        elif isinstance(rec, TtsWordEvent):
            prev = words.get(rec.utterance_id)
            expected = 0 if prev is None else prev.index + 1
            if rec.index != expected:
                report.append(
                    Violation(i, "tts contiguity", f"{rec.utterance_id}: index {rec.index}, expected {expected}")
                )
            if rec.t_end < rec.t_start or (prev is not None and rec.t_start < prev.t_end):
                report.append(Violation(i, "tts timing", f"{rec.utterance_id}: word {rec.index} overlaps"))
            words[rec.utterance_id] = rec
    return report
