from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from turntaker.engine import EngineInputError, TurnEngine
from turntaker.fuzz import FuzzParams, random_stream
from turntaker.model import EngineConfig, Policy
from turntaker.oracle import reference_decisions

SHORT = FuzzParams(min_duration_ms=3_000, max_duration_ms=20_000)


def engine_decisions(events, config=None, policy=Policy.PROPOSED):
    try:
        return TurnEngine(config, policy).run(events)
    except EngineInputError:
        return None


@pytest.mark.parametrize("policy", list(Policy))
@given(seed=st.integers(0, 2**32 - 1))
def test_engine_matches_reference(policy, seed):
    events = random_stream(random.Random(seed), policy, params=SHORT)
    assert TurnEngine(policy=policy).run(events) == reference_decisions(events, policy=policy)


@given(seed=st.integers(0, 2**32 - 1), cut=st.floats(0, 1))
def test_reference_on_a_prefix_is_a_prefix(seed, cut):
    events = random_stream(random.Random(seed), Policy.PROPOSED, params=SHORT)
    k = int(len(events) * cut)
    assert reference_decisions(events[:k]) == reference_decisions(events)[:k]


@pytest.mark.parametrize(
    "mutant",
    [
        EngineConfig(dual_favor_min_ms=600),
        EngineConfig(interrupt_confirm_ms=300),
        EngineConfig(similarity_threshold=0.7),
        EngineConfig(prep_partial_gap_ms=300),
        EngineConfig(prep_prob_threshold=0.3),
        EngineConfig(timeout_schedule=((0.6, 1100), (0.3, 2000))),
    ],
    ids=["dual", "confirm", "similarity", "gap", "probability", "schedule"],
)
def test_comparison_detects_a_perturbed_engine(mutant):
    """The differential check is only useful if it notices small rule changes."""
    diverged = 0
    for seed in range(30):
        events = random_stream(random.Random(f"mutant-{seed}"), Policy.PROPOSED)
        if engine_decisions(events, mutant) != reference_decisions(events):
            diverged += 1
    assert diverged > 0
