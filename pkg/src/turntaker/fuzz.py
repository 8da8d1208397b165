"""Random but valid input streams for differential testing.

Word and completion events depend on what the engine decided (a word can only
arrive for an utterance that is playing), so the generator drives a live
engine while it draws user behavior at random. The resulting stream is then a
fixed input that any implementation can be checked against.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass

from .engine import TurnEngine
from .model import (
    KIND_PRIORITY,
    AsrEvent,
    AsrKind,
    Decision,
    EngineConfig,
    InputEvent,
    Policy,
    PreparedReady,
    Tick,
    TtsWordEvent,
    TurnShiftEstimate,
    VapFrame,
)

VOCAB = "so do you have any favorite movies i like the a and but what about music yeah".split()
P_TS_LEVELS = (0.0, 0.1, 0.2, 0.25, 0.35, 0.6, 0.7, 0.95)
# (p_now, p_future) centers: user-favoring, robot-favoring, backchannel-like, split, on the threshold
REGIMES = ((0.85, 0.8), (0.2, 0.15), (0.3, 0.8), (0.8, 0.2), (0.5, 0.5))


@dataclass(frozen=True)
class FuzzParams:
    min_duration_ms: int = 5_000
    max_duration_ms: int = 60_000
    frame_period_ms: int = 100
    speech_ms: tuple[int, int] = (100, 2500)
    silence_ms: tuple[int, int] = (100, 3500)
    jitter: float = 0.15
    ready_ms: tuple[int, int] = (0, 2500)
    drop_ready: float = 0.1
    duplicate_ready: float = 0.05
    tick_rate: float = 0.05


def random_stream(
    rng: random.Random,
    policy: Policy | str = Policy.PROPOSED,
    config: EngineConfig | None = None,
    params: FuzzParams | None = None,
    baseline_silence_ms: int = 1000,
) -> list[InputEvent]:
    params = params or FuzzParams()
    config = config or EngineConfig()
    driver = TurnEngine(config, Policy(policy), baseline_silence_ms)
    queue: list[tuple[int, int, int, InputEvent]] = []
    seq = 0

    def push(event: InputEvent) -> None:
        nonlocal seq
        seq += 1
        heapq.heappush(queue, (event.t, KIND_PRIORITY[type(event)], seq, event))

    period = params.frame_period_ms
    t_frame = rng.choice((0, 0, rng.randrange(period)))
    speaking = rng.random() < 0.5
    switch_at = t_frame + rng.randint(*params.speech_ms)
    regime = rng.choice(REGIMES)
    words: list[str] = []
    next_partial = 0
    duration = rng.randint(params.min_duration_ms, params.max_duration_ms)
    while t_frame <= duration:
        if t_frame >= switch_at:
            speaking = not speaking
            span = params.speech_ms if speaking else params.silence_ms
            switch_at = t_frame + rng.randint(*span)
            if not speaking and words and rng.random() < 0.85:
                push(AsrEvent(t_frame + rng.randint(0, 400), AsrKind.FINAL, " ".join(words)))
                words = []
        if rng.random() < 0.15:
            regime = rng.choice(REGIMES)
        p_now = min(1.0, max(0.0, round(regime[0] + rng.uniform(-params.jitter, params.jitter), 2)))
        p_future = min(1.0, max(0.0, round(regime[1] + rng.uniform(-params.jitter, params.jitter), 2)))
        push(VapFrame(t_frame, p_now, p_future, speaking, False))
        if speaking and t_frame >= next_partial:
            words.append(rng.choice(VOCAB))
            push(AsrEvent(t_frame + rng.randint(0, period - 1), AsrKind.PARTIAL, " ".join(words)))
            next_partial = t_frame + rng.choice((100, 200, 300, 300, 500))
        if rng.random() < 0.08:
            push(TurnShiftEstimate(t_frame + rng.randint(0, period - 1), " ".join(words), rng.choice(P_TS_LEVELS)))
        if rng.random() < params.tick_rate:
            push(Tick(t_frame + rng.randint(0, period - 1)))
        t_frame += period

    events: list[InputEvent] = []
    pending_words: dict[str, list[TtsWordEvent]] = {}
    while queue:
        _, _, _, event = heapq.heappop(queue)
        if event.t > duration:
            break
        if isinstance(event, TtsWordEvent):
            remaining = pending_words.get(event.utterance_id)
            if not remaining or remaining[0] is not event:
                continue
            remaining.pop(0)
        events.append(event)
        for d in driver.step(event):
            if d.kind is Decision.PREPARE_REQUEST and rng.random() >= params.drop_ready:
                text = " ".join(rng.choice(VOCAB) for _ in range(rng.choice((0, 1, 2, 3, 4, 6))))
                push(PreparedReady(d.t + rng.randint(*params.ready_ms), d.handle_id, text))
                if rng.random() < params.duplicate_ready:
                    push(PreparedReady(d.t + rng.randint(*params.ready_ms), d.handle_id, text + " again"))
            elif d.kind is Decision.TAKE_TURN:
                planned = driver.utterance_words
                start = d.t + rng.randint(0, 150)
                scheduled = []
                for i, w in enumerate(planned):
                    length = rng.randint(80, 400)
                    scheduled.append(TtsWordEvent(start, d.utterance_id, i, w, start, start + length))
                    start += length + rng.choice((0, 0, 0, 50, 300, 900))
                pending_words[d.utterance_id] = scheduled
                for w in scheduled:
                    push(w)
            elif d.kind is Decision.STOP_AT_WORD_BOUNDARY:
                pending_words[d.utterance_id] = []
    return events
