"""Small builders for hand-written event streams."""

from __future__ import annotations

from turntaker.model import AsrEvent, AsrKind, PreparedReady, TtsWordEvent, TurnShiftEstimate, VapFrame

USER = (0.8, 0.75)
ROBOT = (0.2, 0.15)


def frames(t0: int, t1: int, probs: tuple[float, float], vad_user: bool = False, vad_robot: bool = False, step: int = 100):
    """Frames at t0, t0+step, ... strictly before t1."""
    return [VapFrame(t, probs[0], probs[1], vad_user, vad_robot) for t in range(t0, t1, step)]


def partial(t: int, text: str) -> AsrEvent:
    return AsrEvent(t, AsrKind.PARTIAL, text)


def final(t: int, text: str) -> AsrEvent:
    return AsrEvent(t, AsrKind.FINAL, text)


def estimate(t: int, text: str, p: float) -> TurnShiftEstimate:
    return TurnShiftEstimate(t, text, p)


def ready(t: int, handle_id: str, text: str) -> PreparedReady:
    return PreparedReady(t, handle_id, text)


def words(utterance_id: str, text: str, start: int, word_ms: int = 300, gaps: dict[int, int] | None = None):
    out = []
    t = start
    for i, w in enumerate(text.split()):
        out.append(TtsWordEvent(t, utterance_id, i, w, t, t + word_ms))
        t += word_ms + (gaps or {}).get(i, 0)
    return out


def merge(*streams):
    """Merge event lists in engine input order (time, then kind priority)."""
    from turntaker.model import KIND_PRIORITY

    items = [e for s in streams for e in s]
    return sorted(items, key=lambda e: (e.t, KIND_PRIORITY[type(e)]))


def kinds(decisions):
    return [d.kind.value for d in decisions]


def flat(outputs):
    return [d for out in outputs for d in out]
