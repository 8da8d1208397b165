"""Straight-line reference interpreter for the turn engine.

For every event it re-derives the whole situation (who holds the floor,
which robot word is playing, the current transcript, runs of qualifying
frames, pending preparations) by scanning the input prefix and the decisions
already emitted, then applies the rules once. Nothing is carried from one
event to the next except the decision list itself, so it shares no
incremental bookkeeping with ``TurnEngine``. It is quadratic in the worst
case and only meant for verification.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

from .engine import (
    GazeAction,
    OverlapClass,
    backchannel_opportunity,
    classify_overlap,
    frame_yields,
    gaze_policy,
)
from .model import (
    AsrEvent,
    Decision,
    EngineConfig,
    EngineEvent,
    InputEvent,
    Policy,
    PreparedReady,
    Tick,
    TtsWordEvent,
    TurnShiftEstimate,
    VapFrame,
)
from .pipeline import Scorer, should_prepare, similarity


@dataclass
class _Robot:
    """The most recent robot utterance as seen from event ``i``."""

    take_index: int  # event index that emitted TakeTurn
    utterance_id: str
    words: list[str]
    stop_event: int | None
    stop_word: int | None
    end_event: int | None  # event index whose clock advance ended the utterance


class ReferenceInterpreter:
    def __init__(
        self,
        config: EngineConfig | None = None,
        policy: Policy | str = Policy.PROPOSED,
        baseline_silence_ms: int = 1000,
        scorer: Scorer = similarity,
    ):
        self.config = config or EngineConfig()
        self.policy = Policy(policy)
        self.baseline_silence_ms = baseline_silence_ms
        self.scorer = scorer

    def run(self, events: Sequence[InputEvent]) -> list[list[EngineEvent]]:
        # Positions of frames in the input; a function of the input alone.
        self._frame_at = [j for j, e in enumerate(events) if type(e) is VapFrame]
        # Positions of non-empty decision lists; a view of the output history.
        self._decided_at: list[int] = []
        outs: list[list[EngineEvent]] = []
        for i in range(len(events)):
            out = self._decide(events, outs, i)
            if out:
                self._decided_at.append(i)
            outs.append(out)
        return outs

    def _decisions_back(self, outs, i, lo: int = 0):
        """Decisions emitted at positions ``lo..i-1``, newest first."""
        positions = self._decided_at
        k = bisect_right(positions, i - 1) - 1
        while k >= 0 and positions[k] >= lo:
            j = positions[k]
            for d in reversed(outs[j]):
                yield j, d
            k -= 1

    # -- prefix queries ----------------------------------------------------------

    def _last_decision(self, outs, i, kind: Decision, lo: int = 0) -> tuple[int, EngineEvent] | None:
        for j, d in self._decisions_back(outs, i, lo):
            if d.kind is kind:
                return j, d
        return None

    def _robot(self, events, outs, i) -> _Robot | None:
        found = self._last_decision(outs, i, Decision.TAKE_TURN)
        if found is None:
            return None
        m, take = found
        uid = take.utterance_id
        request = self._last_decision(outs, m + 1, Decision.PREPARE_REQUEST)
        words: list[str] = []
        for j in range(request[0] + 1, m + 1):
            e = events[j]
            if type(e) is PreparedReady and e.handle_id == uid:
                words = e.response_text.split()
                break
        stop_event = stop_word = None
        stop = self._last_decision(outs, i, Decision.STOP_AT_WORD_BOUNDARY, m + 1)
        if stop is not None:
            stop_event, stop_word = stop[0], stop[1].last_spoken_index
        robot = _Robot(m, uid, words, stop_event, stop_word, None)
        if not words:
            robot.end_event = m
            return robot
        if stop_word == -1:
            robot.end_event = stop_event
            return robot
        final = stop_word if stop_word is not None else len(words) - 1
        final_at = None
        for j in range(m + 1, i + 1):
            e = events[j]
            if type(e) is TtsWordEvent and e.utterance_id == uid and e.index == final:
                final_at = j
                break
        if final_at is None:
            return robot
        t_end = events[final_at].t_end
        start = max(final_at, stop_event if stop_event is not None else m) + 1
        for j in range(start, i + 1):
            if events[j].t > t_end:
                robot.end_event = j
                break
        return robot

    @staticmethod
    def _last_word(events, robot: _Robot, i) -> TtsWordEvent | None:
        for j in range(i - 1, robot.take_index, -1):
            e = events[j]
            if type(e) is TtsWordEvent and e.utterance_id == robot.utterance_id:
                return e
        return None

    def _frames_back(self, events, i, lo: int = 0):
        """Frames at positions ``lo..i``, newest first."""
        positions = self._frame_at
        k = bisect_right(positions, i) - 1
        while k >= 0 and positions[k] >= lo:
            yield positions[k], events[positions[k]]
            k -= 1

    def _previous_frame(self, events, i) -> VapFrame | None:
        for j, f in self._frames_back(events, i - 1):
            return f
        return None

    def _silence_since(self, events, i) -> int | None:
        since = None
        for _, f in self._frames_back(events, i):
            if f.vad_user:
                return since
            since = f.t
        return since

    def _gaze_averted(self, outs, i) -> bool:
        # Taking the turn always ends with gaze on the user, so the scan can stop there.
        for _, d in self._decisions_back(outs, i):
            if d.kind is Decision.GAZE_AVERT:
                return True
            if d.kind is Decision.GAZE_RETURN or d.kind is Decision.TAKE_TURN:
                return False
        return False

    # -- decision --------------------------------------------------------------

    def _decide(self, events: Sequence[InputEvent], outs: list[list[EngineEvent]], i: int) -> list[EngineEvent]:
        cfg = self.config
        policy = self.policy
        proposed = policy is Policy.PROPOSED
        ev = events[i]
        t = ev.t
        out: list[EngineEvent] = []

        def emit(kind: Decision, **kw) -> None:
            out.append(EngineEvent(t=t, kind=kind, **kw))

        averted = self._gaze_averted(outs, i)
        robot = self._robot(events, outs, i)

        # Floor situation after this event's clock advance.
        if robot is None:
            floor_user, speaking = True, False
            epoch_first, epoch_kind, reset_at = 0, "start", 0
        elif robot.stop_event is not None:
            floor_user = True
            speaking = robot.end_event is None or robot.end_event > i
            epoch_first, epoch_kind, reset_at = robot.stop_event + 1, "stop", robot.take_index + 1
        elif robot.end_event is not None and robot.end_event <= i:
            floor_user, speaking = True, False
            first = robot.end_event if robot.end_event > robot.take_index else robot.take_index + 1
            epoch_first, epoch_kind, reset_at = first, "natural", first
        else:
            floor_user, speaking = False, True
            epoch_first, epoch_kind, reset_at = robot.take_index + 1, "robot", robot.take_index + 1

        if robot is not None and robot.end_event == i and robot.end_event > robot.take_index:
            if robot.stop_word != -1:
                if averted:
                    averted = False
                    emit(Decision.GAZE_RETURN)
                if epoch_kind == "natural" and not proposed:
                    emit(Decision.LISTENING_LIGHT, on=False)

        # User-side facts within the current epoch.
        last_frame = None
        for _, f in self._frames_back(events, i):
            last_frame = f
            break
        vad_now = last_frame.vad_user if last_frame is not None else False
        silence_since = self._silence_since(events, i)
        user_spoke = epoch_kind == "stop" or (
            floor_user and any(f.vad_user for _, f in self._frames_back(events, i, epoch_first))
        )

        allowed = False
        if floor_user:
            found = self._last_decision(outs, i, Decision.TURN_SHIFT_ALLOWED, epoch_first)
            if found is not None:
                allowed = True
                if proposed:
                    a = found[0]
                    previous = next((f for _, f in self._frames_back(events, a)), None)
                    for j in range(a + 1, i):
                        e = events[j]
                        if type(e) is VapFrame:
                            if e.vad_user and not (previous is not None and previous.vad_user):
                                allowed = False
                            previous = e

        # Transcript, p_ts and preparation state since the last reset.
        asr_lo = reset_at if proposed else epoch_first
        finals: list[str] = []
        partial: str | None = None
        last_asr: AsrEvent | None = None
        p_ts = 0.0
        for j in range(asr_lo, i + 1):
            e = events[j]
            if type(e) is AsrEvent:
                if not proposed and not floor_user:
                    continue
                if e.final:
                    finals.append(e.transcript)
                    partial = None
                else:
                    partial = e.transcript
                last_asr = e
            elif type(e) is TurnShiftEstimate and proposed:
                p_ts = e.p_ts

        def transcript() -> str:
            parts = finals + ([partial] if partial is not None else [])
            return " ".join(p for p in parts if p)

        request = self._last_decision(outs, i, Decision.PREPARE_REQUEST, reset_at)
        last_prepared = request[1].context_snapshot if request else None
        ready_text: str | None = None
        inflight_id: str | None = None
        if request is not None:
            r, req = request
            inflight_id = req.handle_id
            for j in range(r + 1, i + 1):
                e = events[j]
                if type(e) is PreparedReady and e.handle_id == req.handle_id:
                    ready_text, inflight_id = e.response_text, None
                    break
        newest = request or self._last_decision(outs, i, Decision.PREPARE_REQUEST)
        handle_counter = int(newest[1].handle_id[1:]) if newest else 0

        def prepare() -> None:
            nonlocal ready_text, inflight_id, last_prepared, handle_counter
            text = transcript()
            if inflight_id is not None:
                emit(Decision.PREPARE_CANCEL, handle_id=inflight_id)
            handle_counter += 1
            hid = f"p{handle_counter}"
            emit(Decision.PREPARE_REQUEST, handle_id=hid, context_snapshot=text)
            inflight_id, ready_text, last_prepared = hid, None, text

        def maybe_prepare() -> None:
            text = transcript()
            if not text or last_asr is None:
                return
            if should_prepare(
                p_ts,
                t - last_asr.t,
                text,
                last_prepared,
                self.scorer,
                prob_threshold=cfg.prep_prob_threshold,
                gap_threshold_ms=cfg.prep_partial_gap_ms,
                similarity_threshold=cfg.similarity_threshold,
            ):
                prepare()

        def timed_out(now: int) -> bool:
            return silence_since is not None and now - silence_since >= cfg.timeout_for(p_ts)

        def baseline_endpoint() -> None:
            nonlocal allowed, averted
            if allowed or not user_spoke or silence_since is None:
                return
            if t - silence_since < self.baseline_silence_ms:
                return
            allowed = True
            emit(Decision.TURN_SHIFT_ALLOWED)
            emit(Decision.LISTENING_LIGHT, on=True)
            if not averted:
                averted = True
                emit(Decision.GAZE_AVERT)
            if last_asr is not None and last_asr.final and transcript():
                prepare()

        stopped_now = False
        if isinstance(ev, VapFrame):
            if speaking and robot is not None:
                word = self._last_word(events, robot, i)
                final_now = robot.stop_word if robot.stop_word is not None else len(robot.words) - 1
                if word is not None and t > word.t_end and word.index < final_now:
                    decided = False
                    word_at = self._event_index_of(events, word, robot.take_index, i)
                    for j, f in self._frames_back(events, i - 1, word_at + 1):
                        final_then = (
                            robot.stop_word
                            if robot.stop_event is not None and robot.stop_event < j
                            else len(robot.words) - 1
                        )
                        if f.t > word.t_end and word.index < final_then:
                            decided = True
                            break
                    if not decided:
                        if gaze_policy(policy, ev, cfg) is GazeAction.AVERT and not averted:
                            averted = True
                            emit(Decision.GAZE_AVERT)
            if not floor_user:
                if proposed and speaking and ev.vad_user:
                    episode: list[VapFrame] = []
                    for _, f in self._frames_back(events, i, robot.take_index + 1):
                        if not f.vad_user:
                            break
                        episode.append(f)
                    episode.reverse()
                    before = classify_overlap(episode[:-1], cfg)
                    now = classify_overlap(episode, cfg)
                    if before is OverlapClass.PENDING and now is OverlapClass.INTERRUPTION:
                        word = self._last_word(events, robot, i)
                        k = word.index if word is not None else -1
                        emit(Decision.STOP_AT_WORD_BOUNDARY, utterance_id=robot.utterance_id, last_spoken_index=k)
                        floor_user, allowed, stopped_now = True, False, True
                        if k == -1:
                            speaking = False
                            if averted:
                                averted = False
                                emit(Decision.GAZE_RETURN)
                    elif before is OverlapClass.PENDING and now is OverlapClass.COLLABORATIVE:
                        emit(Decision.CONTINUE_OVERLAP)
            elif not proposed:
                baseline_endpoint()
            else:
                previous = self._previous_frame(events, i)
                if ev.vad_user and not (previous.vad_user if previous is not None else False):
                    allowed = False
                dual_since = None
                for _, f in self._frames_back(events, i, epoch_first):
                    if not frame_yields(f, cfg):
                        break
                    dual_since = f.t
                prev_bc = backchannel_opportunity(previous, cfg) if previous is not None else False
                if backchannel_opportunity(ev, cfg) and not prev_bc and not speaking:
                    emit(Decision.BACKCHANNEL_OPPORTUNITY)
                if user_spoke and not allowed:
                    if (dual_since is not None and t - dual_since >= cfg.dual_favor_min_ms) or timed_out(t):
                        allowed = True
                        emit(Decision.TURN_SHIFT_ALLOWED)
                maybe_prepare()
        elif isinstance(ev, Tick):
            if floor_user:
                if not proposed:
                    baseline_endpoint()
                else:
                    if user_spoke and not allowed and timed_out(t):
                        allowed = True
                        emit(Decision.TURN_SHIFT_ALLOWED)
                    maybe_prepare()
        elif isinstance(ev, AsrEvent):
            if not proposed and floor_user and allowed and ev.final and request is None:
                prepare()
        elif isinstance(ev, TurnShiftEstimate):
            if proposed and floor_user:
                maybe_prepare()
        elif isinstance(ev, TtsWordEvent):
            if averted:
                averted = False
                emit(Decision.GAZE_RETURN)

        # Take the turn.
        if floor_user and not speaking and allowed and ready_text is not None and not stopped_now:
            if not (proposed and cfg.take_turn_requires_user_silence and vad_now):
                emit(Decision.TAKE_TURN, utterance_id=self._ready_handle(outs, out, i))
                if averted:
                    averted = False
                    emit(Decision.GAZE_RETURN)
                if not ready_text.split() and not proposed:
                    emit(Decision.LISTENING_LIGHT, on=False)
        return out

    @staticmethod
    def _event_index_of(events, target, lo: int, hi: int) -> int:
        for j in range(hi - 1, lo, -1):
            if events[j] is target:
                return j
        return lo

    def _ready_handle(self, outs, current: list[EngineEvent], i: int) -> str:
        for d in reversed(current):
            if d.kind is Decision.PREPARE_REQUEST:
                return d.handle_id
        found = self._last_decision(outs, i, Decision.PREPARE_REQUEST)
        return found[1].handle_id


def reference_decisions(
    events: Sequence[InputEvent],
    config: EngineConfig | None = None,
    policy: Policy | str = Policy.PROPOSED,
    baseline_silence_ms: int = 1000,
    scorer: Scorer = similarity,
) -> list[list[EngineEvent]]:
    return ReferenceInterpreter(config, policy, baseline_silence_ms, scorer).run(events)
