"""Deterministic turn-taking reactor.

One ``TurnEngine`` consumes a totally ordered stream of input events and
returns, per event, the decisions it triggers. Two policies share the
machinery:

* ``Policy.PROPOSED`` fuses the acoustic projection (p_now / p_future) with
  the lexical turn-completion probability, prepares responses ahead of time
  and handles barge-in.
* ``Policy.BASELINE`` is silence endpointing with a listening light and no
  barge-in.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

from .model import (
    AsrEvent,
    Decision,
    DialogueTurn,
    EngineConfig,
    EngineEvent,
    InputEvent,
    Policy,
    PreparedReady,
    Speaker,
    Tick,
    TtsWordEvent,
    TurnShiftEstimate,
    VapFrame,
    favors_robot,
    favors_user,
)
from .pipeline import PreparedResponse, ResponsePipeline, Scorer, build_history, render_context, should_prepare, similarity


class EngineInputError(ValueError):
    """The event was rejected; engine state is unchanged."""


class YieldStatus(str, Enum):
    NOT_YIELDED = "NotYielded"
    ALLOWED_DUAL_FAVOR = "AllowedDualFavor"
    ALLOWED_TIMEOUT = "AllowedTimeout"


class OverlapClass(str, Enum):
    PENDING = "Pending"
    INTERRUPTION = "Interruption"
    COLLABORATIVE = "Collaborative"


class GazeAction(str, Enum):
    AVERT = "Avert"
    HOLD = "Hold"


@dataclass(frozen=True)
class FloorState:
    holder: Speaker
    user_vad_active: bool
    robot_speaking: bool
    user_silence_since: int | None
    dual_favor_since: int | None
    overlap_onset: int | None
    latest_p_ts: float
    turn_shift_allowed: bool


# ---------------------------------------------------------------------------
# Stateless rules
# ---------------------------------------------------------------------------


def frame_yields(frame: VapFrame, config: EngineConfig) -> bool:
    """True when both predictions favor the party expected to take the floor."""
    thr = config.favor_threshold
    if config.yield_polarity == "robot":
        both = favors_robot(frame.p_now, thr) and favors_robot(frame.p_future, thr)
    else:
        both = favors_user(frame.p_now, thr) and favors_user(frame.p_future, thr)
    return both and (config.dual_favor_clock_during_speech or not frame.vad_user)


def evaluate_yield(state: FloorState, config: EngineConfig, now: int, frame: VapFrame | None = None) -> YieldStatus:
    """Yield status of the user's turn; ``state.dual_favor_since`` must already include ``frame``."""
    if frame is not None and state.dual_favor_since is not None:
        if frame.t - state.dual_favor_since >= config.dual_favor_min_ms:
            return YieldStatus.ALLOWED_DUAL_FAVOR
    if state.user_silence_since is not None:
        if now - state.user_silence_since >= config.timeout_for(state.latest_p_ts):
            return YieldStatus.ALLOWED_TIMEOUT
    return YieldStatus.NOT_YIELDED


def timeout_for(p_ts: float, config: EngineConfig | None = None) -> int:
    if not 0.0 <= p_ts <= 1.0:
        raise ValueError(f"p_ts {p_ts} outside [0, 1]")
    return (config or EngineConfig()).timeout_for(p_ts)


def classify_overlap(frames_since_onset: Sequence[VapFrame], config: EngineConfig) -> OverlapClass:
    """Classify user speech overlapping the robot from the frames since its onset.

    The first condition met wins: both predictions favoring the user for
    ``interrupt_confirm_ms`` is an interruption; an overlap that lasts that
    long without it is collaborative.
    """
    if not frames_since_onset:
        return OverlapClass.PENDING
    thr = config.favor_threshold
    onset = frames_since_onset[0].t
    run_start: int | None = None
    for frame in frames_since_onset:
        if favors_user(frame.p_now, thr) and favors_user(frame.p_future, thr):
            if run_start is None:
                run_start = frame.t
        else:
            run_start = None
        if run_start is not None and frame.t - run_start >= config.interrupt_confirm_ms:
            return OverlapClass.INTERRUPTION
        if frame.t - onset >= config.interrupt_confirm_ms:
            return OverlapClass.COLLABORATIVE
    return OverlapClass.PENDING


def gaze_policy(policy: Policy, frame_at_pause_onset: VapFrame, config: EngineConfig) -> GazeAction:
    if policy is Policy.BASELINE:
        return GazeAction.AVERT
    if favors_user(frame_at_pause_onset.p_now, config.favor_threshold):
        return GazeAction.AVERT
    return GazeAction.HOLD


def backchannel_opportunity(frame: VapFrame, config: EngineConfig) -> bool:
    thr = config.favor_threshold
    return favors_robot(frame.p_now, thr) and favors_user(frame.p_future, thr)


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


class TurnEngine:
    def __init__(
        self,
        config: EngineConfig | None = None,
        policy: Policy = Policy.PROPOSED,
        baseline_silence_ms: int = 1000,
        scorer: Scorer = similarity,
    ):
        self.config = config or EngineConfig()
        self.config.validate()
        if baseline_silence_ms <= 0:
            raise ValueError("baseline_silence_ms must be > 0")
        self.policy = Policy(policy)
        self.baseline_silence_ms = baseline_silence_ms
        self.scorer = scorer
        self.decisions: list[EngineEvent] = []
        self.history: list[DialogueTurn] = []
        self.pipeline = ResponsePipeline()

        self.last_t: int | None = None
        self.floor = Speaker.USER
        self.vad_user = False
        self.silence_since: int | None = None
        self.prev_backchannel = False
        self.gaze_averted = False

        # Robot utterance in progress.
        self.robot_speaking = False
        self.utterance_id: str | None = None
        self.utterance_text = ""
        self.utterance_words: list[str] = []
        self.utterance_start = 0
        self.last_word: TtsWordEvent | None = None
        self.stop_index: int | None = None
        self.pause_decided = False
        self.overlap_onset: int | None = None
        self.overlap_class: OverlapClass | None = None
        self.overlap_run_since: int | None = None

        self._reset_user_turn()

    # -- public --------------------------------------------------------------

    @property
    def turn_shift_allowed(self) -> bool:
        return self.allowed

    def floor_state(self) -> FloorState:
        return FloorState(
            holder=self.floor,
            user_vad_active=self.vad_user,
            robot_speaking=self.robot_speaking,
            user_silence_since=self.silence_since,
            dual_favor_since=self.dual_since,
            overlap_onset=self.overlap_onset,
            latest_p_ts=self.p_ts,
            turn_shift_allowed=self.allowed,
        )

    @property
    def transcript(self) -> str:
        parts = [*self.finals, self.partial] if self.partial is not None else list(self.finals)
        return " ".join(p for p in parts if p)

    def step(self, event: InputEvent) -> list[EngineEvent]:
        self._validate(event)
        t = event.t
        out: list[EngineEvent] = []
        self._advance(t, out)
        if isinstance(event, VapFrame):
            self._on_frame(event, out)
        elif isinstance(event, Tick):
            self._on_tick(t, out)
        elif isinstance(event, AsrEvent):
            self._on_asr(event, out)
        elif isinstance(event, TurnShiftEstimate):
            self._on_estimate(event, out)
        elif isinstance(event, TtsWordEvent):
            self._on_word(event, out)
        elif isinstance(event, PreparedReady):
            self._on_ready(event)
        self._try_take_turn(t, out)
        self.last_t = t
        self.decisions.extend(out)
        return out

    def run(self, events: Sequence[InputEvent]) -> list[list[EngineEvent]]:
        return [self.step(e) for e in events]

    # -- validation ------------------------------------------------------------

    def _validate(self, event: InputEvent) -> None:
        if not isinstance(event, (VapFrame, Tick, AsrEvent, TurnShiftEstimate, TtsWordEvent, PreparedReady)):
            raise EngineInputError(f"unsupported event type {type(event).__name__}")
        if self.last_t is not None and event.t < self.last_t:
            raise EngineInputError(f"out-of-order timestamp {event.t} < {self.last_t}")
        if event.t < 0:
            raise EngineInputError("negative timestamp")
        if isinstance(event, VapFrame):
            for name in ("p_now", "p_future"):
                p = getattr(event, name)
                if not 0.0 <= p <= 1.0:
                    raise EngineInputError(f"{name}={p} outside [0, 1]")
        elif isinstance(event, TurnShiftEstimate):
            if not 0.0 <= event.p_ts <= 1.0:
                raise EngineInputError(f"p_ts={event.p_ts} outside [0, 1]")
        elif isinstance(event, TtsWordEvent):
            if not self.robot_speaking or event.utterance_id != self.utterance_id:
                raise EngineInputError(f"word for {event.utterance_id!r} but no such utterance is playing")
            expected = 0 if self.last_word is None else self.last_word.index + 1
            if event.index != expected:
                raise EngineInputError(f"word index {event.index}, expected {expected}")
            if event.index >= len(self.utterance_words):
                raise EngineInputError(f"word index {event.index} beyond the planned utterance")
            if self.stop_index is not None and event.index > self.stop_index:
                raise EngineInputError(f"word {event.index} after stop at word {self.stop_index}")
            if event.t_end < event.t_start:
                raise EngineInputError("word ends before it starts")

    # -- helpers -------------------------------------------------------------

    def _emit(self, out: list[EngineEvent], t: int, kind: Decision, **fields) -> None:
        out.append(EngineEvent(t=t, kind=kind, **fields))

    def _reset_user_turn(self) -> None:
        self.finals: list[str] = []
        self.partial: str | None = None
        self.last_asr_t: int | None = None
        self.last_asr_final = False
        self.p_ts = 0.0
        self.last_prepared: str | None = None
        self.ready: PreparedResponse | None = None
        self.prep_issued = False
        self.allowed = False
        self.dual_since: int | None = None
        self.user_spoke = False
        self.user_turn_start: int | None = None

    def _final_index(self) -> int:
        if self.stop_index is not None:
            return self.stop_index
        return len(self.utterance_words) - 1

    def _advance(self, t: int, out: list[EngineEvent]) -> None:
        if not self.robot_speaking or self.last_word is None:
            return
        if self.last_word.index == self._final_index() and t > self.last_word.t_end:
            self._robot_finished(t, self.last_word.t_end, out)

    def _robot_finished(self, t: int, t_end: int, out: list[EngineEvent]) -> None:
        self.robot_speaking = False
        self.history.append(
            DialogueTurn(Speaker.ROBOT, self.utterance_text, self._final_index() + 1, self.utterance_start, t_end)
        )
        self.utterance_id = None
        self.last_word = None
        self.overlap_onset = self.overlap_class = self.overlap_run_since = None
        if self.gaze_averted:
            self.gaze_averted = False
            self._emit(out, t, Decision.GAZE_RETURN)
        if self.floor is Speaker.ROBOT:
            self.floor = Speaker.USER
            self._reset_user_turn()
            if self.policy is Policy.BASELINE:
                self._emit(out, t, Decision.LISTENING_LIGHT, on=False)

    # -- event handlers ------------------------------------------------------

    def _on_frame(self, frame: VapFrame, out: list[EngineEvent]) -> None:
        t = frame.t
        cfg = self.config
        rising = frame.vad_user and not self.vad_user
        self.vad_user = frame.vad_user
        if frame.vad_user:
            self.silence_since = None
        elif self.silence_since is None:
            self.silence_since = t
        if self.floor is Speaker.USER and frame.vad_user:
            self.user_spoke = True
            if self.user_turn_start is None:
                self.user_turn_start = t
        bc_now = backchannel_opportunity(frame, cfg)
        bc_before, self.prev_backchannel = self.prev_backchannel, bc_now

        if self.robot_speaking:
            self._check_pause(frame, out)
        if self.floor is Speaker.ROBOT:
            if self.policy is Policy.PROPOSED and self.robot_speaking:
                self._track_overlap(frame, out)
            return

        if self.policy is Policy.BASELINE:
            self._baseline_endpoint(t, out)
            return

        if rising:
            self.allowed = False
        if frame_yields(frame, cfg):
            if self.dual_since is None:
                self.dual_since = t
        else:
            self.dual_since = None
        if bc_now and not bc_before and not self.robot_speaking:
            self._emit(out, t, Decision.BACKCHANNEL_OPPORTUNITY)
        if self.user_spoke and not self.allowed:
            status = evaluate_yield(self.floor_state(), cfg, t, frame)
            if status is not YieldStatus.NOT_YIELDED:
                self.allowed = True
                self._emit(out, t, Decision.TURN_SHIFT_ALLOWED)
        self._maybe_prepare(t, out)

    def _on_tick(self, t: int, out: list[EngineEvent]) -> None:
        if self.floor is not Speaker.USER:
            return
        if self.policy is Policy.BASELINE:
            self._baseline_endpoint(t, out)
            return
        if self.user_spoke and not self.allowed:
            state = self.floor_state()
            if evaluate_yield(state, self.config, t) is not YieldStatus.NOT_YIELDED:
                self.allowed = True
                self._emit(out, t, Decision.TURN_SHIFT_ALLOWED)
        self._maybe_prepare(t, out)

    def _on_asr(self, event: AsrEvent, out: list[EngineEvent]) -> None:
        if self.policy is Policy.BASELINE and (self.floor is not Speaker.USER or self.robot_speaking):
            return
        if event.final:
            self.finals.append(event.transcript)
            self.partial = None
        else:
            self.partial = event.transcript
        self.last_asr_t = event.t
        self.last_asr_final = event.final
        if self.policy is Policy.BASELINE and self.allowed and event.final and not self.prep_issued:
            self._begin_preparation(event.t, out)

    def _on_estimate(self, event: TurnShiftEstimate, out: list[EngineEvent]) -> None:
        if self.policy is Policy.BASELINE:
            return
        self.p_ts = event.p_ts
        if self.floor is Speaker.USER:
            self._maybe_prepare(event.t, out)

    def _on_word(self, event: TtsWordEvent, out: list[EngineEvent]) -> None:
        self.last_word = event
        self.pause_decided = False
        if self.gaze_averted:
            self.gaze_averted = False
            self._emit(out, event.t, Decision.GAZE_RETURN)

    def _on_ready(self, event: PreparedReady) -> None:
        response = self.pipeline.complete(event.handle_id, event.response_text, event.t)
        if response is not None:
            self.ready = response

    # -- rules -----------------------------------------------------------------

    def _check_pause(self, frame: VapFrame, out: list[EngineEvent]) -> None:
        word = self.last_word
        if word is None or self.pause_decided:
            return
        if frame.t > word.t_end and word.index < self._final_index():
            self.pause_decided = True
            if gaze_policy(self.policy, frame, self.config) is GazeAction.AVERT and not self.gaze_averted:
                self.gaze_averted = True
                self._emit(out, frame.t, Decision.GAZE_AVERT)

    def _track_overlap(self, frame: VapFrame, out: list[EngineEvent]) -> None:
        t = frame.t
        cfg = self.config
        if not frame.vad_user:
            self.overlap_onset = self.overlap_class = self.overlap_run_since = None
            return
        if self.overlap_onset is None:
            self.overlap_onset = t
            self.overlap_class = OverlapClass.PENDING
            self.overlap_run_since = None
        if self.overlap_class is not OverlapClass.PENDING:
            return
        thr = cfg.favor_threshold
        if favors_user(frame.p_now, thr) and favors_user(frame.p_future, thr):
            if self.overlap_run_since is None:
                self.overlap_run_since = t
        else:
            self.overlap_run_since = None
        if self.overlap_run_since is not None and t - self.overlap_run_since >= cfg.interrupt_confirm_ms:
            self._stop_for_interruption(t, out)
        elif t - self.overlap_onset >= cfg.interrupt_confirm_ms:
            self.overlap_class = OverlapClass.COLLABORATIVE
            self._emit(out, t, Decision.CONTINUE_OVERLAP)

    def _stop_for_interruption(self, t: int, out: list[EngineEvent]) -> None:
        index = self.last_word.index if self.last_word is not None else -1
        self._emit(out, t, Decision.STOP_AT_WORD_BOUNDARY, utterance_id=self.utterance_id, last_spoken_index=index)
        self.stop_index = index
        self.floor = Speaker.USER
        self.overlap_onset = self.overlap_class = self.overlap_run_since = None
        self.allowed = False
        self.dual_since = None
        self.user_spoke = True
        self.user_turn_start = self.user_turn_start if self.user_turn_start is not None else t
        if index == -1:
            self._robot_finished(t, t, out)

    def _baseline_endpoint(self, t: int, out: list[EngineEvent]) -> None:
        if self.allowed or not self.user_spoke or self.silence_since is None:
            return
        if t - self.silence_since < self.baseline_silence_ms:
            return
        self.allowed = True
        self._emit(out, t, Decision.TURN_SHIFT_ALLOWED)
        self._emit(out, t, Decision.LISTENING_LIGHT, on=True)
        if not self.gaze_averted:
            self.gaze_averted = True
            self._emit(out, t, Decision.GAZE_AVERT)
        if self.last_asr_final and self.transcript:
            self._begin_preparation(t, out)

    def _maybe_prepare(self, t: int, out: list[EngineEvent]) -> None:
        transcript = self.transcript
        if not transcript or self.last_asr_t is None:
            return
        cfg = self.config
        if should_prepare(
            self.p_ts,
            t - self.last_asr_t,
            transcript,
            self.last_prepared,
            self.scorer,
            prob_threshold=cfg.prep_prob_threshold,
            gap_threshold_ms=cfg.prep_partial_gap_ms,
            similarity_threshold=cfg.similarity_threshold,
        ):
            self._begin_preparation(t, out)

    def _begin_preparation(self, t: int, out: list[EngineEvent]) -> None:
        transcript = self.transcript
        handle, canceled = self.pipeline.begin_preparation(transcript, t)
        if canceled is not None:
            self._emit(out, t, Decision.PREPARE_CANCEL, handle_id=canceled.id)
        self._emit(out, t, Decision.PREPARE_REQUEST, handle_id=handle.id, context_snapshot=transcript)
        self.last_prepared = transcript
        self.ready = None
        self.prep_issued = True

    def prompt_context(self) -> str:
        """History plus current transcript, as it would be sent to a language model."""
        return render_context(build_history(self.history), self.transcript)

    def _try_take_turn(self, t: int, out: list[EngineEvent]) -> None:
        if self.floor is not Speaker.USER or self.robot_speaking or not self.allowed or self.ready is None:
            return
        if (
            self.policy is Policy.PROPOSED
            and self.config.take_turn_requires_user_silence
            and self.vad_user
        ):
            return
        ready = self.ready
        self._emit(out, t, Decision.TAKE_TURN, utterance_id=ready.handle_id)
        if self.gaze_averted:
            self.gaze_averted = False
            self._emit(out, t, Decision.GAZE_RETURN)
        transcript = self.transcript
        start = self.user_turn_start if self.user_turn_start is not None else t
        end = self.silence_since if self.silence_since is not None else t
        self.history.append(DialogueTurn(Speaker.USER, transcript, len(transcript.split()), start, max(start, end)))
        self.floor = Speaker.ROBOT
        self.robot_speaking = True
        self.utterance_id = ready.handle_id
        self.utterance_text = ready.response_text
        self.utterance_words = ready.response_text.split()
        self.utterance_start = t
        self.last_word = None
        self.stop_index = None
        self.pause_decided = False
        self.overlap_onset = self.overlap_class = self.overlap_run_since = None
        self._reset_user_turn()
        if not self.utterance_words:
            self._robot_finished(t, t, out)


def create_engine(
    config: EngineConfig | None = None,
    policy: Policy | str = Policy.PROPOSED,
    baseline_silence_ms: int = 1000,
    scorer: Scorer = similarity,
) -> TurnEngine:
    return TurnEngine(config, Policy(policy), baseline_silence_ms, scorer)
