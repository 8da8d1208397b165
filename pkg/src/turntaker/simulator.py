"""Seeded discrete-event simulation of a user talking with the engine.

A scenario scripts what the user says and where they pause. The simulator
realizes that script against the engine's behavior:

* A turn's segments keep their relative timing. The next turn starts
  ``reply_gap_ms`` after the robot finished answering the previous one, so
  scripted times are nominal.
* Under the baseline policy the user does not speak while the listening
  light is on; the rest of the turn resumes ``resume_gap_ms`` after it goes
  off. Under the proposed policy the user simply carries on, which produces
  barge-ins when the robot started too early.

Acoustic frames, ASR results and turn-completion estimates are synthesized
from the realized timeline, with seeded noise. Everything runs on a virtual
clock; two runs with the same inputs produce identical logs.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from bisect import bisect_right
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Any, Iterable, Sequence

from .engine import TurnEngine
from .model import (
    KIND_PRIORITY,
    AsrEvent,
    AsrKind,
    Decision,
    EngineConfig,
    InputEvent,
    LogRecord,
    Policy,
    PreparedReady,
    RobotOnset,
    Session,
    TtsWordEvent,
    TurnShiftEstimate,
    UserSegment,
    VapFrame,
    validate_event_stream,
)
from .pipeline import GenerationLatency, HandleStatus, ResponsePipeline, similarity


class ScenarioError(ValueError):
    """The scenario is malformed; raised before any simulation starts."""


class SimulationError(RuntimeError):
    """The simulation reached an inconsistent state."""


class Boundary(str, Enum):
    HOLD = "Hold"
    YIELD = "Yield"
    BACKCHANNEL = "Backchannel"


# Ideal (p_now, p_future) per situation, as probabilities that the user speaks.
USER_FLOOR = (0.8, 0.75)
ROBOT_FLOOR = (0.2, 0.15)
BARGE_IN = (0.85, 0.8)
BACKCHANNEL = (0.7, 0.2)
ROBOT_PAUSE = (0.3, 0.2)
ROBOT_PAUSE_AMBIGUOUS = (0.7, 0.4)
COMPLETE_P_TS = 0.8


# ---------------------------------------------------------------------------
# Scenario
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    t_start: int
    t_end: int
    transcript: str
    boundary: Boundary

    @property
    def words(self) -> list[str]:
        return self.transcript.split()

    def words_done_by(self, t: int) -> int:
        """Words completed by time ``t`` under uniform word timing."""
        n = len(self.words)
        if t >= self.t_end:
            return n
        if t <= self.t_start:
            return 0
        return (t - self.t_start) * n // (self.t_end - self.t_start)


@dataclass(frozen=True)
class RobotPause:
    after_index: int
    ms: int
    # The robot's prosody at this pause sounds like it is giving up the turn.
    ambiguous: bool = False


@dataclass(frozen=True)
class RobotScript:
    text: str
    word_ms: int = 300
    pauses: tuple[RobotPause, ...] = ()

    def timing(self, start: int) -> list[tuple[int, str, int, int]]:
        """``(index, word, t_start, t_end)`` for every planned word."""
        gaps = {p.after_index: p.ms for p in self.pauses}
        out = []
        t = start
        for i, word in enumerate(self.text.split()):
            out.append((i, word, t, t + self.word_ms))
            t += self.word_ms + gaps.get(i, 0)
        return out


@dataclass(frozen=True)
class BackchannelCue:
    """A short user vocalization during the robot's answer to turn ``after_turn``."""

    after_turn: int
    offset_ms: int
    duration_ms: int
    transcript: str = "yeah"


@dataclass(frozen=True)
class NoiseModel:
    miss_rate: float = 0.2
    sigma: float = 0.1
    vad_jitter_ms: int = 0
    anticipation_ms: int = 200
    # Lexical model errors: a completed turn scored as incomplete, and a
    # turn-internal pause point scored as complete.
    ts_miss_rate: float = 0.0
    ts_false_completion_rate: float = 0.1

    @classmethod
    def ideal(cls) -> "NoiseModel":
        return cls(miss_rate=0.0, sigma=0.0, ts_miss_rate=0.0, ts_false_completion_rate=0.0)

    def validate(self) -> None:
        for name in ("miss_rate", "ts_miss_rate", "ts_false_completion_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ScenarioError(f"noise.{name} must be in [0, 1]")
        for name in ("sigma", "vad_jitter_ms", "anticipation_ms"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"noise.{name} must be >= 0")


@dataclass(frozen=True)
class LatencyModel:
    asr_partial_period_ms: int = 300
    asr_final_lag_ms: int = 300
    llm_ms: int = 500
    tts_ms: int = 1000
    baseline_silence_ms: int = 1000
    llm_jitter_ms: int = 0
    tts_jitter_ms: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ValueError(f"{f.name} must be a non-negative integer, got {value!r}")
        if self.asr_partial_period_ms == 0:
            raise ValueError("asr_partial_period_ms must be > 0")

    def generation(self) -> GenerationLatency:
        return GenerationLatency(self.llm_ms, self.tts_ms, self.llm_jitter_ms, self.tts_jitter_ms)

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LatencyModel":
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown latency field(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class UserBehavior:
    reply_gap_ms: int = 700
    resume_gap_ms: int = 500
    give_up_ms: int = 10_000
    tail_ms: int = 1_000


@dataclass(frozen=True)
class Scenario:
    id: str
    segments: tuple[Segment, ...]
    robot_scripts: tuple[RobotScript, ...]
    seed: int = 0
    noise: NoiseModel = field(default_factory=NoiseModel)
    backchannels: tuple[BackchannelCue, ...] = ()
    behavior: UserBehavior = field(default_factory=UserBehavior)

    def validate(self) -> None:
        if not self.id:
            raise ScenarioError("scenario id must be non-empty")
        if not self.segments:
            raise ScenarioError(f"{self.id}: no user segments")
        previous_end = None
        for i, seg in enumerate(self.segments):
            if seg.boundary is Boundary.BACKCHANNEL:
                raise ScenarioError(f"{self.id}: segment {i} boundary must be Hold or Yield")
            if seg.t_start < 0 or seg.t_end <= seg.t_start:
                raise ScenarioError(f"{self.id}: segment {i} has an empty or negative interval")
            if previous_end is not None and seg.t_start <= previous_end:
                raise ScenarioError(f"{self.id}: segment {i} overlaps or touches the previous one")
            if not seg.words:
                raise ScenarioError(f"{self.id}: segment {i} has an empty transcript")
            previous_end = seg.t_end
        if self.segments[-1].boundary is not Boundary.YIELD:
            raise ScenarioError(f"{self.id}: the last segment must end with a Yield")
        if not self.robot_scripts or any(not s.text.split() for s in self.robot_scripts):
            raise ScenarioError(f"{self.id}: robot scripts must be non-empty")
        for script in self.robot_scripts:
            if script.word_ms <= 0:
                raise ScenarioError(f"{self.id}: robot word_ms must be > 0")
            n = len(script.text.split())
            for pause in script.pauses:
                if not 0 <= pause.after_index < n - 1 or pause.ms <= 0:
                    raise ScenarioError(f"{self.id}: robot pause {pause} out of range")
        for cue in self.backchannels:
            if cue.after_turn < 0 or cue.offset_ms < 0 or cue.duration_ms <= 0:
                raise ScenarioError(f"{self.id}: invalid backchannel {cue}")
        self.noise.validate()

    def turns(self) -> list[list[Segment]]:
        out: list[list[Segment]] = [[]]
        for seg in self.segments:
            out[-1].append(seg)
            if seg.boundary is Boundary.YIELD:
                out.append([])
        return [turn for turn in out if turn]

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "seed": self.seed,
            "segments": [
                {"t_start": s.t_start, "t_end": s.t_end, "transcript": s.transcript, "boundary": s.boundary.value}
                for s in self.segments
            ],
            "robot_scripts": [
                {"text": r.text, "word_ms": r.word_ms, "pauses": [asdict(p) for p in r.pauses]}
                for r in self.robot_scripts
            ],
            "noise": asdict(self.noise),
            "backchannels": [asdict(b) for b in self.backchannels],
            "behavior": asdict(self.behavior),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Scenario":
        def strict(kind: type, raw: Any, where: str):
            if not isinstance(raw, dict):
                raise ScenarioError(f"{where} must be an object")
            unknown = sorted(set(raw) - {f.name for f in fields(kind)})
            if unknown:
                raise ScenarioError(f"{where}: unknown field(s) {', '.join(unknown)}")
            try:
                return kind(**raw)
            except TypeError as exc:
                raise ScenarioError(f"{where}: {exc}") from None

        if not isinstance(data, dict):
            raise ScenarioError("scenario must be an object")
        allowed = {"id", "seed", "segments", "robot_scripts", "noise", "backchannels", "behavior"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ScenarioError(f"unknown scenario field(s): {', '.join(unknown)}")
        try:
            segments = []
            for i, raw in enumerate(data["segments"]):
                raw = dict(raw)
                raw["boundary"] = Boundary(raw.get("boundary"))
                segments.append(strict(Segment, raw, f"segments[{i}]"))
            scripts = []
            for i, raw in enumerate(data["robot_scripts"]):
                raw = dict(raw)
                raw["pauses"] = tuple(
                    strict(RobotPause, p, f"robot_scripts[{i}].pauses") for p in raw.get("pauses", ())
                )
                scripts.append(strict(RobotScript, raw, f"robot_scripts[{i}]"))
            scenario = cls(
                id=str(data["id"]),
                seed=int(data.get("seed", 0)),
                segments=tuple(segments),
                robot_scripts=tuple(scripts),
                noise=strict(NoiseModel, data.get("noise", {}), "noise"),
                backchannels=tuple(
                    strict(BackchannelCue, b, f"backchannels[{i}]") for i, b in enumerate(data.get("backchannels", ()))
                ),
                behavior=strict(UserBehavior, data.get("behavior", {}), "behavior"),
            )
        except KeyError as exc:
            raise ScenarioError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(str(exc)) from None
        scenario.validate()
        return scenario


def dialogue_seed(master_seed: int, scenario_id: str) -> int:
    """Per-dialogue seed: first 8 bytes of sha256("<master>:<scenario id>"), big-endian."""
    digest = hashlib.sha256(f"{master_seed}:{scenario_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Timeline and synthetic tracks
# ---------------------------------------------------------------------------


@dataclass
class _Spoken:
    """A realized user segment."""

    seg: Segment
    missed: bool = False
    vad_start: int = 0
    vad_end: int = 0
    turn: int = 0
    false_completion: bool = False
    ts_missed: bool = False


@dataclass
class _Utterance:
    utterance_id: str
    words: list[tuple[int, str, int, int]]
    pauses: dict[int, RobotPause]
    final_index: int

    @property
    def start(self) -> int:
        return self.words[0][2]

    @property
    def end(self) -> int:
        return self.words[self.final_index][3]


class Timeline:
    """What actually happened, queried by the frame synthesizer."""

    def __init__(self, noise: NoiseModel):
        self.noise = noise
        self.spoken: list[_Spoken] = []
        self._starts: list[int] = []
        self.utterances: list[_Utterance] = []

    def add(self, spoken: _Spoken) -> None:
        self.spoken.append(spoken)
        self._starts.append(spoken.seg.t_start)

    def vad_user(self, t: int) -> bool:
        # jittered intervals never reach further back than one jitter span
        k = bisect_right(self._starts, t + self.noise.vad_jitter_ms) - 1
        while k >= 0:
            s = self.spoken[k]
            if s.vad_start <= t < s.vad_end:
                return True
            if s.seg.t_end + self.noise.vad_jitter_ms < t:
                break
            k -= 1
        return False

    def _speaking(self, t: int) -> _Spoken | None:
        k = bisect_right(self._starts, t) - 1
        while k >= 0:
            s = self.spoken[k]
            if s.seg.t_start <= t < s.seg.t_end:
                return s
            if s.seg.boundary is not Boundary.BACKCHANNEL:
                return None
            k -= 1
        return None

    def last_turn_segment(self, t: int) -> _Spoken | None:
        """Latest Hold/Yield segment that started at or before ``t``."""
        k = bisect_right(self._starts, t) - 1
        while k >= 0:
            if self.spoken[k].seg.boundary is not Boundary.BACKCHANNEL:
                return self.spoken[k]
            k -= 1
        return None

    def robot_state(self, t: int) -> tuple[_Utterance | None, str]:
        """``(utterance, "word" | "pause" | "done")`` for the latest onset at or before t."""
        for utt in reversed(self.utterances):
            if utt.start <= t:
                if t >= utt.end:
                    return utt, "done"
                for i, _, ws, we in utt.words[: utt.final_index + 1]:
                    if ws <= t < we:
                        return utt, "word"
                return utt, "pause"
        return None, "done"

    def ideal(self, t: int) -> tuple[float, float, bool, bool]:
        """Noise-free ``(p_now, p_future, vad_user, vad_robot)`` at ``t``."""
        utt, robot = self.robot_state(t)
        vad_robot = robot == "word"
        vad_user = self.vad_user(t)
        user = self._speaking(t)
        if user is not None:
            if user.seg.boundary is Boundary.BACKCHANNEL:
                p = BACKCHANNEL
            elif robot != "done":
                p = BARGE_IN
            elif (
                user.seg.boundary is Boundary.YIELD
                and not user.missed
                and t >= user.seg.t_end - self.noise.anticipation_ms
            ):
                p = ROBOT_FLOOR
            else:
                p = USER_FLOOR
        elif robot == "word":
            p = ROBOT_FLOOR
        elif robot == "pause":
            word = max(i for i, _, ws, _ in utt.words if ws <= t)
            pause = utt.pauses.get(word)
            p = ROBOT_PAUSE_AMBIGUOUS if pause is not None and pause.ambiguous else ROBOT_PAUSE
        else:
            last = self.last_turn_segment(t)
            answered = utt is not None and last is not None and utt.start >= last.seg.t_end
            if last is not None and last.seg.boundary is Boundary.YIELD and not last.missed and not answered:
                p = ROBOT_FLOOR
            else:
                p = USER_FLOOR
        return p[0], p[1], vad_user, vad_robot


def _jitter(p: float, sigma: float, rng: random.Random) -> float:
    if sigma == 0:
        return p
    return round(min(1.0, max(0.0, rng.gauss(p, sigma))), 4)


def _stream(seed: int, *parts: Any) -> random.Random:
    return random.Random(":".join(str(p) for p in (seed, *parts)))


def _realize(seg: Segment, turn: int, j: int, noise: NoiseModel, seed: int) -> _Spoken:
    spoken = _Spoken(seg, turn=turn, vad_start=seg.t_start, vad_end=seg.t_end)
    if seg.boundary is Boundary.YIELD:
        spoken.missed = _stream(seed, "yield", turn).random() < noise.miss_rate
    ts = _stream(seed, "ts", turn, j)
    if seg.boundary is Boundary.YIELD:
        spoken.ts_missed = ts.random() < noise.ts_miss_rate
    elif seg.boundary is Boundary.HOLD:
        spoken.false_completion = ts.random() < noise.ts_false_completion_rate
    if noise.vad_jitter_ms:
        vad = _stream(seed, "vad", turn, j)
        j_ms = noise.vad_jitter_ms
        spoken.vad_start = seg.t_start + vad.randint(-j_ms, j_ms)
        spoken.vad_end = max(spoken.vad_start + 1, seg.t_end + vad.randint(-j_ms, j_ms))
    return spoken


def synth_vap_track(
    scenario: Scenario, seed: int | None = None, frame_period_ms: int = 100, tail_ms: int = 2000
) -> list[VapFrame]:
    """Frames for the scenario's nominal timeline, with no robot speech."""
    scenario.validate()
    seed = scenario.seed if seed is None else seed
    timeline = Timeline(scenario.noise)
    turn = 0
    j = 0
    for seg in scenario.segments:
        timeline.add(_realize(seg, turn, j, scenario.noise, seed))
        j += 1
        if seg.boundary is Boundary.YIELD:
            turn += 1
            j = 0
    rng = _stream(seed, "frames")
    end = scenario.segments[-1].t_end + tail_ms
    frames = []
    for t in range(0, end + 1, frame_period_ms):
        p_now, p_future, vad_user, vad_robot = timeline.ideal(t)
        sigma = scenario.noise.sigma
        frames.append(VapFrame(t, _jitter(p_now, sigma, rng), _jitter(p_future, sigma, rng), vad_user, vad_robot))
    return frames


def segment_asr(seg: Segment, latency: LatencyModel) -> list[AsrEvent]:
    """Partials every period during the segment plus one at its end, then the Final."""
    words = seg.words
    out: list[AsrEvent] = []
    shown = 0
    times = list(range(seg.t_start + latency.asr_partial_period_ms, seg.t_end, latency.asr_partial_period_ms))
    for t in [*times, seg.t_end]:
        n = seg.words_done_by(t)
        if n == 0 or n == shown:
            continue
        shown = n
        out.append(AsrEvent(t, AsrKind.PARTIAL, " ".join(words[:n])))
    out.append(AsrEvent(seg.t_end + latency.asr_final_lag_ms, AsrKind.FINAL, seg.transcript))
    return out


def synth_asr_track(scenario: Scenario, latency: LatencyModel | None = None, seed: int | None = None) -> list[AsrEvent]:
    """ASR results for the scenario's nominal timeline.

    The track has no random component; ``seed`` is accepted so every track
    builder shares one signature.
    """
    scenario.validate()
    latency = latency or LatencyModel()
    events = [e for seg in scenario.segments for e in segment_asr(seg, latency)]
    return sorted(events, key=lambda e: e.t)


# ---------------------------------------------------------------------------
# Dialogue simulation
# ---------------------------------------------------------------------------

_INTERNAL = -2  # user/robot world actions run before any input at the same time


@dataclass
class _Awaiting:
    turn: int
    yield_end: int
    answer: str | None = None


class _Dialogue:
    def __init__(
        self,
        scenario: Scenario,
        policy: Policy,
        config: EngineConfig,
        latency: LatencyModel,
        seed: int,
        corpus_id: str,
        scorer,
    ):
        self.scenario = scenario
        self.policy = policy
        self.config = config
        self.latency = latency
        self.seed = seed
        self.noise = scenario.noise
        self.behavior = scenario.behavior
        self.engine = TurnEngine(config, policy, latency.baseline_silence_ms, scorer)
        self.world = ResponsePipeline(latency.generation(), rng=_stream(seed, "generation"))
        self.timeline = Timeline(self.noise)
        self.turns = scenario.turns()
        self.frame_rng = _stream(seed, "frames")
        self.queue: list[tuple[int, int, int, Any]] = []
        self.seq = 0
        self.log: list[LogRecord] = [
            Session(
                0,
                policy.value,
                scenario.id,
                corpus_id,
                seed,
                latency.baseline_silence_ms,
                json.dumps(config.to_dict(), separators=(",", ":"), sort_keys=True),
            )
        ]
        self.light = False
        self.waiting: tuple[int, int] | None = None  # (turn, segment) held back by the light
        self.turn_shift = 0
        self.turn_base = 0
        self.awaiting: _Awaiting | None = None
        self.takes = 0
        self.answers = 0
        self.end_at: int | None = None
        self.robot_end_token = 0
        self.asr_finals: list[str] = []
        self.asr_partial: str | None = None
        self.asr_turn = -1
        nominal = scenario.segments[-1].t_end - scenario.segments[0].t_start
        self.deadline = nominal + len(self.turns) * (self.behavior.give_up_ms + 30_000) + 60_000

    # -- queue ---------------------------------------------------------------

    def push(self, t: int, item: Any, priority: int | None = None) -> None:
        self.seq += 1
        if priority is None:
            priority = KIND_PRIORITY[type(item)]
        heapq.heappush(self.queue, (t, priority, self.seq, item))

    def run(self) -> list[LogRecord]:
        first = self.turns[0][0]
        self.turn_base = first.t_start
        self.push(first.t_start, ("user", 0, 0), _INTERNAL)
        self.push(0, ("frame",), KIND_PRIORITY[VapFrame])
        while self.queue:
            t, _, _, item = heapq.heappop(self.queue)
            if self.end_at is not None and t > self.end_at:
                break
            if t > self.deadline:
                raise SimulationError(f"{self.scenario.id}: dialogue did not finish by t={self.deadline}")
            if isinstance(item, tuple):
                self._internal(t, item)
            else:
                self._feed(item)
        return self.log

    # -- world actions -------------------------------------------------------

    def _internal(self, t: int, item: tuple) -> None:
        kind = item[0]
        if kind == "frame":
            p_now, p_future, vad_user, vad_robot = self.timeline.ideal(t)
            sigma = self.noise.sigma
            frame = VapFrame(
                t, _jitter(p_now, sigma, self.frame_rng), _jitter(p_future, sigma, self.frame_rng), vad_user, vad_robot
            )
            self._feed(frame)
            self.push(t + self.config.frame_period_ms, ("frame",), KIND_PRIORITY[VapFrame])
        elif kind == "user":
            self._user_due(t, item[1], item[2])
        elif kind == "asr":
            self._asr(item[1], item[2])
        elif kind == "robot_end":
            if item[1] == self.robot_end_token:
                self._robot_end(t, item[2])
        elif kind == "give_up":
            self._give_up(t, item[1])
        elif kind == "backchannel":
            cue: BackchannelCue = item[1]
            seg = Segment(t, t + cue.duration_ms, cue.transcript, Boundary.BACKCHANNEL)
            self._start_segment(_Spoken(seg, vad_start=seg.t_start, vad_end=seg.t_end, turn=-1))

    def _user_due(self, t: int, turn: int, j: int) -> None:
        if self.policy is Policy.BASELINE and self.light:
            self.waiting = (turn, j)
            return
        segments = self.turns[turn]
        if j == 0:
            self.turn_base = t
            self.turn_shift = 0
        nominal = segments[j]
        start = t
        shifted = Segment(start, start + nominal.t_end - nominal.t_start, nominal.transcript, nominal.boundary)
        self.turn_shift = start - (self.turn_base + nominal.t_start - segments[0].t_start)
        spoken = _realize(shifted, turn, j, self.noise, self.seed)
        self._start_segment(spoken)
        for event in segment_asr(shifted, self.latency):
            self.push(event.t, ("asr", event, (len(self.timeline.spoken) - 1, turn)), KIND_PRIORITY[AsrEvent])
        if j + 1 < len(segments):
            pause = segments[j + 1].t_start - nominal.t_end
            self.push(shifted.t_end + pause, ("user", turn, j + 1), _INTERNAL)
        else:
            self.awaiting = _Awaiting(turn, shifted.t_end)
            self.push(shifted.t_end + self.behavior.give_up_ms, ("give_up", turn), _INTERNAL)

    def _start_segment(self, spoken: _Spoken) -> None:
        self.timeline.add(spoken)
        seg = spoken.seg
        self.log.append(UserSegment(seg.t_start, seg.t_end, seg.transcript, seg.boundary.value))

    def _asr(self, event: AsrEvent, where: tuple[int, int]) -> None:
        index, turn = where
        spoken = self.timeline.spoken[index]
        if turn != self.asr_turn:
            self.asr_turn, self.asr_finals, self.asr_partial = turn, [], None
        if event.final:
            self.asr_finals.append(event.transcript)
            self.asr_partial = None
        else:
            self.asr_partial = event.transcript
        self._feed(event)
        transcript = " ".join([*self.asr_finals, *([self.asr_partial] if self.asr_partial else [])])
        complete = event.transcript == spoken.seg.transcript
        if spoken.seg.boundary is Boundary.YIELD:
            p_ts = COMPLETE_P_TS if complete and not spoken.ts_missed else 0.0
        else:
            p_ts = COMPLETE_P_TS if complete and spoken.false_completion else 0.0
        self.push(event.t, TurnShiftEstimate(event.t, transcript, p_ts))

    def _give_up(self, t: int, turn: int) -> None:
        if self.awaiting is not None and self.awaiting.turn == turn and self.awaiting.answer is None:
            self.awaiting = None
            self._next_turn(t, turn)

    def _next_turn(self, t: int, turn: int) -> None:
        if turn + 1 < len(self.turns):
            self.push(t, ("user", turn + 1, 0), _INTERNAL)
        else:
            self.end_at = t + self.behavior.tail_ms

    def _robot_end(self, t: int, utterance_id: str) -> None:
        if self.awaiting is not None and self.awaiting.answer == utterance_id:
            turn = self.awaiting.turn
            self.awaiting = None
            self._next_turn(t + self.behavior.reply_gap_ms, turn)

    # -- engine --------------------------------------------------------------

    def _feed(self, event: InputEvent) -> None:
        if isinstance(event, PreparedReady):
            handle = self.world.handles.get(event.handle_id)
            if handle is None or handle.status is not HandleStatus.IN_FLIGHT:
                return
            self.world.complete(event.handle_id, event.response_text, event.t)
        elif isinstance(event, TtsWordEvent):
            utt = self.timeline.utterances[-1]
            if event.utterance_id != utt.utterance_id or event.index > utt.final_index:
                return  # synthesis was cut off at a word boundary
        decisions = self.engine.step(event)
        self.log.append(event)
        self.log.extend(decisions)
        for d in decisions:
            self._react(d)

    def _react(self, d) -> None:
        t = d.t
        if d.kind is Decision.PREPARE_CANCEL:
            self.world.cancel(d.handle_id)
        elif d.kind is Decision.PREPARE_REQUEST:
            handle, _ = self.world.begin_preparation(d.context_snapshot, t, handle_id=d.handle_id)
            script = self.scenario.robot_scripts[self.takes % len(self.scenario.robot_scripts)]
            self.push(handle.due_at, PreparedReady(handle.due_at, d.handle_id, script.text))
        elif d.kind is Decision.TAKE_TURN:
            self._take_turn(t, d.utterance_id)
        elif d.kind is Decision.STOP_AT_WORD_BOUNDARY:
            utt = self.timeline.utterances[-1]
            if d.last_spoken_index < 0:
                raise SimulationError("stop before the first word was delivered")
            utt.final_index = d.last_spoken_index
            self.robot_end_token += 1
            self.push(utt.end, ("robot_end", self.robot_end_token, utt.utterance_id), _INTERNAL)
        elif d.kind is Decision.LISTENING_LIGHT:
            self.light = bool(d.on)
            if not self.light and self.waiting is not None:
                turn, j = self.waiting
                self.waiting = None
                self.push(t + self.behavior.resume_gap_ms, ("user", turn, j), _INTERNAL)

    def _take_turn(self, t: int, utterance_id: str) -> None:
        text = self.engine.utterance_text
        script = next(
            (s for s in self.scenario.robot_scripts if s.text == text), RobotScript(text)
        )
        words = script.timing(t)
        utt = _Utterance(utterance_id, words, {p.after_index: p for p in script.pauses}, len(words) - 1)
        label = self._label(t)
        self.timeline.utterances.append(utt)
        self.log.append(RobotOnset(t, utterance_id, label))
        self.takes += 1
        for i, word, ws, we in words:
            self.push(ws, TtsWordEvent(ws, utterance_id, i, word, ws, we))
        self.robot_end_token += 1
        self.push(utt.end, ("robot_end", self.robot_end_token, utterance_id), _INTERNAL)
        if label == "clean" and self.awaiting is not None and self.awaiting.answer is None:
            self.awaiting.answer = utterance_id
            for cue in self.scenario.backchannels:
                if cue.after_turn == self.awaiting.turn:
                    self.push(t + cue.offset_ms, ("backchannel", cue), _INTERNAL)

    def _label(self, t: int) -> str:
        current = self.timeline._speaking(t)
        if current is not None and current.seg.boundary is not Boundary.BACKCHANNEL:
            return "interruption"
        last = self.timeline.last_turn_segment(t)
        if last is not None and last.seg.boundary is Boundary.HOLD:
            return "interruption"
        return "clean"


def run_dialogue(
    scenario: Scenario,
    policy: Policy | str = Policy.PROPOSED,
    config: EngineConfig | None = None,
    latency: LatencyModel | None = None,
    seed: int | None = None,
    corpus_id: str = "",
    scorer=similarity,
    validate: bool = True,
) -> list[LogRecord]:
    """Simulate one dialogue and return its complete log."""
    scenario.validate()
    config = config or EngineConfig()
    latency = latency or LatencyModel()
    seed = scenario.seed if seed is None else seed
    log = _Dialogue(scenario, Policy(policy), config, latency, seed, corpus_id, scorer).run()
    if validate:
        violations = validate_event_stream(log, config.frame_period_ms)
        if violations:
            raise SimulationError(f"{scenario.id}: invalid log, first violation {violations[0]}")
    return log


@dataclass
class CorpusResult:
    policy: Policy
    corpus_id: str
    logs: dict[str, list[LogRecord]]
    report: Any


def run_corpus(
    scenarios: Sequence[Scenario],
    policy: Policy | str = Policy.PROPOSED,
    config: EngineConfig | None = None,
    latency: LatencyModel | None = None,
    seed: int = 0,
    corpus_id: str = "",
    noise: NoiseModel | None = None,
    bin_ms: int = 100,
) -> CorpusResult:
    """Simulate every scenario; dialogue seeds come from ``dialogue_seed(seed, scenario.id)``."""
    from .metrics import aggregate

    if not scenarios:
        raise ValueError("run_corpus needs at least one scenario")
    ids = [s.id for s in scenarios]
    if len(set(ids)) != len(ids):
        raise ScenarioError("scenario ids must be unique within a corpus")
    logs = {}
    for scenario in sorted(scenarios, key=lambda s: s.id):
        if noise is not None:
            scenario = replace(scenario, noise=noise)
        logs[scenario.id] = run_dialogue(
            scenario, policy, config, latency, dialogue_seed(seed, scenario.id), corpus_id
        )
    return CorpusResult(Policy(policy), corpus_id, logs, aggregate(logs.values(), bin_ms=bin_ms))


# ---------------------------------------------------------------------------
# Bundled corpus
# ---------------------------------------------------------------------------

DEFAULT_CORPUS_ID = "default"
DEFAULT_CORPUS_SEED = 20240


@lru_cache(maxsize=1)
def _phrases() -> dict[str, Any]:
    text = resources.files("turntaker").joinpath("data/phrases.json").read_text(encoding="utf-8")
    return json.loads(text)


def generate_scenario(index: int, seed: int = DEFAULT_CORPUS_SEED) -> Scenario:
    """One corpus scenario: 6-10 turns, Hold pauses uniform in 0.3-2.5 s."""
    phrases = _phrases()
    rng = random.Random(f"corpus:{seed}:{index}")
    segments: list[Segment] = []
    t = 1000
    n_turns = rng.randint(6, 10)
    for _ in range(n_turns):
        sentence = rng.choice(phrases["user"]).split()
        holds = rng.choices((0, 1, 2), weights=(0.5, 0.38, 0.12))[0]
        opener = rng.choice(phrases["openers"]).split() if holds and rng.random() < 0.6 else []
        words = opener + sentence
        holds = min(holds, len(words) - 1)
        cuts = sorted(rng.sample(range(1, len(words)), holds)) if holds else []
        if opener and holds:
            cuts[0] = len(opener)
            cuts = sorted(set(cuts))
        pieces = [words[a:b] for a, b in zip([0, *cuts], [*cuts, len(words)])]
        for k, piece in enumerate(pieces):
            word_ms = rng.randint(26, 36) * 10
            end = t + len(piece) * word_ms
            boundary = Boundary.YIELD if k == len(pieces) - 1 else Boundary.HOLD
            segments.append(Segment(t, end, " ".join(piece), boundary))
            t = end + (rng.randint(30, 250) * 10 if boundary is Boundary.HOLD else 5000)
    scripts = []
    for raw in rng.sample(phrases["robot"], 4):
        n = len(raw["text"].split())
        pauses = []
        if n > 6 and rng.random() < 0.7:
            pauses.append(RobotPause(rng.randint(2, n - 3), rng.randint(3, 7) * 100, rng.random() < 0.5))
        scripts.append(RobotScript(raw["text"], rng.randint(27, 33) * 10, tuple(pauses)))
    backchannels = tuple(
        BackchannelCue(turn, rng.randint(8, 15) * 100, rng.randint(3, 5) * 100, rng.choice(phrases["backchannels"]))
        for turn in range(n_turns)
        if rng.random() < 0.25
    )
    return Scenario(
        id=f"s{index:03d}",
        segments=tuple(segments),
        robot_scripts=tuple(scripts),
        seed=rng.randrange(1 << 31),
        backchannels=backchannels,
    )


def generate_corpus(n: int = 100, seed: int = DEFAULT_CORPUS_SEED) -> list[Scenario]:
    return [generate_scenario(i, seed) for i in range(n)]


def default_corpus() -> list[Scenario]:
    """The bundled 100-scenario corpus."""
    root = resources.files("turntaker").joinpath("data/corpus")
    names = sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))
    return [Scenario.from_dict(json.loads(root.joinpath(name).read_text(encoding="utf-8"))) for name in names]


def example_scenario(name: str = "favorite_movies") -> Scenario:
    text = resources.files("turntaker").joinpath(f"data/scenarios/{name}.json").read_text(encoding="utf-8")
    return Scenario.from_dict(json.loads(text))


def write_scenarios(scenarios: Iterable[Scenario], directory) -> None:
    from pathlib import Path

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for scenario in scenarios:
        (out / f"{scenario.id}.json").write_text(json.dumps(scenario.to_dict(), indent=1) + "\n", encoding="utf-8")
