"""Tentative response preparation: when to (re)generate, single-flight
cancellation, and truncation of interrupted robot turns."""

from __future__ import annotations

import math
import random
import re
import zlib
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Sequence

from .model import DialogueTurn, Speaker

Scorer = Callable[[str, str], float]

HASH_SPACE = 1 << 16
_PUNCT = re.compile(r"[^\w\s]")
_WORD = re.compile(r"\S+")


def _normalize(text: str) -> str:
    return " ".join(_PUNCT.sub("", text.lower()).split())


@lru_cache(maxsize=4096)
def _trigram_vector(text: str) -> tuple[tuple[int, int], ...]:
    padded = f" {text} "
    counts = Counter(zlib.crc32(padded[i : i + 3].encode("utf-8")) % HASH_SPACE for i in range(len(padded) - 2))
    return tuple(sorted(counts.items()))


@lru_cache(maxsize=16384)
def similarity(a: str, b: str) -> float:
    """Cosine similarity of hashed character-trigram counts, in [0, 1].

    Text is lowercased and stripped of punctuation first. Counts are integers,
    so the result is exactly symmetric.
    """
    na, nb = _normalize(a), _normalize(b)
    if na == nb:
        return 1.0
    if not na or not nb:
        return 0.0
    va, vb = dict(_trigram_vector(na)), _trigram_vector(nb)
    dot = sum(count * va.get(bucket, 0) for bucket, count in vb)
    norm_a = sum(c * c for c in va.values())
    norm_b = sum(c * c for _, c in vb)
    return min(1.0, max(0.0, dot / math.sqrt(norm_a * norm_b)))


def should_prepare(
    p_ts: float,
    gap_ms: int,
    transcript: str,
    last_prepared_transcript: str | None,
    scorer: Scorer = similarity,
    *,
    prob_threshold: float = 0.2,
    gap_threshold_ms: int = 200,
    similarity_threshold: float = 0.8,
) -> bool:
    """Decide whether the current transcript warrants a new tentative response."""
    if not transcript:
        raise ValueError("transcript must be non-empty")
    triggered = p_ts >= prob_threshold or gap_ms >= gap_threshold_ms
    if not triggered:
        return False
    if last_prepared_transcript is None:
        return True
    return scorer(transcript, last_prepared_transcript) < similarity_threshold


class HandleStatus(str, Enum):
    IN_FLIGHT = "InFlight"
    READY = "Ready"
    CANCELED = "Canceled"


@dataclass
class PreparationHandle:
    id: str
    context_transcript: str
    issued_at: int
    status: HandleStatus = HandleStatus.IN_FLIGHT
    due_at: int | None = None


@dataclass(frozen=True)
class PreparedResponse:
    handle_id: str
    response_text: str
    ready_at: int


@dataclass(frozen=True)
class GenerationLatency:
    """LLM + TTS latency. Jitter is uniform in [-jitter, +jitter], clipped at 0."""

    llm_ms: int = 500
    tts_ms: int = 1000
    llm_jitter_ms: int = 0
    tts_jitter_ms: int = 0

    def sample(self, rng: random.Random | None = None) -> int:
        llm, tts = self.llm_ms, self.tts_ms
        if rng is not None and self.llm_jitter_ms:
            llm = max(0, llm + rng.randint(-self.llm_jitter_ms, self.llm_jitter_ms))
        if rng is not None and self.tts_jitter_ms:
            tts = max(0, tts + rng.randint(-self.tts_jitter_ms, self.tts_jitter_ms))
        return llm + tts


class ResponsePipeline:
    """Single-flight bookkeeping for tentative responses.

    Without a latency model the pipeline only tracks handle states and the
    caller reports completions through ``complete``. With one, ``advance``
    returns the responses that became due.
    """

    def __init__(
        self,
        latency: GenerationLatency | None = None,
        responder: Callable[[str], str] | None = None,
        rng: random.Random | None = None,
        id_prefix: str = "p",
    ):
        self.latency = latency
        self.responder = responder or (lambda context: "")
        self.rng = rng
        self.id_prefix = id_prefix
        self.handles: dict[str, PreparationHandle] = {}
        self._counter = 0
        self._inflight: PreparationHandle | None = None

    @property
    def inflight(self) -> PreparationHandle | None:
        return self._inflight

    def begin_preparation(
        self, context: str, now: int, handle_id: str | None = None
    ) -> tuple[PreparationHandle, PreparationHandle | None]:
        """Start a new preparation; returns ``(new_handle, canceled_handle)``."""
        canceled = self._inflight
        if canceled is not None:
            canceled.status = HandleStatus.CANCELED
        self._counter += 1
        hid = handle_id if handle_id is not None else f"{self.id_prefix}{self._counter}"
        handle = PreparationHandle(hid, context, now)
        if self.latency is not None:
            handle.due_at = now + self.latency.sample(self.rng)
        self.handles[hid] = handle
        self._inflight = handle
        return handle, canceled

    def cancel(self, handle_id: str) -> bool:
        handle = self.handles.get(handle_id)
        if handle is None or handle.status is not HandleStatus.IN_FLIGHT:
            return False
        handle.status = HandleStatus.CANCELED
        if self._inflight is handle:
            self._inflight = None
        return True

    def complete(self, handle_id: str, response_text: str, now: int) -> PreparedResponse | None:
        """Mark a handle ready. Late completions of canceled handles are discarded."""
        handle = self.handles.get(handle_id)
        if handle is None or handle.status is not HandleStatus.IN_FLIGHT:
            return None
        handle.status = HandleStatus.READY
        if self._inflight is handle:
            self._inflight = None
        return PreparedResponse(handle_id, response_text, now)

    def advance(self, now: int) -> list[PreparedResponse]:
        handle = self._inflight
        if handle is None or handle.due_at is None or handle.due_at > now:
            return []
        ready = self.complete(handle.id, self.responder(handle.context_transcript), handle.due_at)
        return [ready] if ready else []

    def inflight_count(self) -> int:
        return sum(1 for h in self.handles.values() if h.status is HandleStatus.IN_FLIGHT)


def truncate_turn(planned_text: str, last_spoken_index: int) -> str:
    """The part of ``planned_text`` spoken up to and including word ``last_spoken_index``."""
    spans = [m.end() for m in _WORD.finditer(planned_text)]
    if not -1 <= last_spoken_index < len(spans):
        raise IndexError(f"last_spoken_index {last_spoken_index} out of range for {len(spans)} words")
    if last_spoken_index == -1:
        return ""
    if last_spoken_index == len(spans) - 1:
        return planned_text
    return planned_text[: spans[last_spoken_index]]


def build_history(turns: Sequence[DialogueTurn]) -> list[tuple[Speaker, str]]:
    history: list[tuple[Speaker, str]] = []
    for turn in sorted(turns, key=lambda tr: tr.t_start):
        if turn.speaker is Speaker.ROBOT:
            text = truncate_turn(turn.planned_text, turn.spoken_word_count - 1)
            if not text.strip():
                continue
            history.append((turn.speaker, text))
        else:
            history.append((turn.speaker, turn.planned_text))
    return history


def render_context(history: Sequence[tuple[Speaker, str]], transcript: str) -> str:
    lines = [f"{speaker.value}: {text}" for speaker, text in history]
    if transcript:
        lines.append(f"{Speaker.USER.value}: {transcript}")
    return "\n".join(lines)
