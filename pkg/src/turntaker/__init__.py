"""Turn-taking coordination for spoken dialogue agents.

Fuses a voice-activity projection stream (p_now / p_future) with an
incremental turn-completion probability to decide when to prepare a reply,
when to take the turn, when to stop for a barge-in and when to avert gaze.
A seeded discrete-event simulator and a metrics suite compare the policy
against a silence-threshold baseline.
"""

from __future__ import annotations

from .engine import (
    EngineInputError,
    FloorState,
    GazeAction,
    OverlapClass,
    TurnEngine,
    YieldStatus,
    backchannel_opportunity,
    classify_overlap,
    create_engine,
    evaluate_yield,
    gaze_policy,
    timeout_for,
)
from .model import (
    AsrEvent,
    AsrKind,
    ConfigError,
    Decision,
    DialogueTurn,
    EngineConfig,
    EngineEvent,
    LogFormatError,
    Policy,
    PreparedReady,
    Speaker,
    Tick,
    TtsWordEvent,
    TurnShiftEstimate,
    VapFrame,
    decode_log,
    encode_log,
    validate_event_stream,
)
from .metrics import AggregateReport, InterruptionReport, ResponseTimeStats, aggregate, compare, interruption_rate, response_times
from .oracle import ReferenceInterpreter, reference_decisions
from .pipeline import ResponsePipeline, build_history, should_prepare, similarity, truncate_turn
from .simulator import (
    Boundary,
    LatencyModel,
    NoiseModel,
    RobotScript,
    Scenario,
    Segment,
    default_corpus,
    example_scenario,
    run_corpus,
    run_dialogue,
)

__version__ = "0.1.0"
