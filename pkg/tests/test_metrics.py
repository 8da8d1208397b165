from __future__ import annotations

import statistics

import pytest
from hypothesis import given
from hypothesis import strategies as st

from turntaker.metrics import (
    InterruptionReport,
    MetricsError,
    ResponseTimeStats,
    aggregate,
    compare,
    format_compare,
    format_histogram,
    format_records,
    format_table,
    interruption_rate,
    local_peaks,
    response_times,
)
from turntaker.model import RobotOnset, Session, UserSegment


def session(policy="proposed", corpus="c", sid="x"):
    return Session(0, policy, sid, corpus, 1, 1000, "{}")


def log_with(onsets, policy="proposed", corpus="c", sid="x"):
    """``onsets``: (segment end, onset delay, label) triples, one user segment each."""
    records = [session(policy, corpus, sid)]
    t = 0
    for end_offset, delay, label in onsets:
        start = t + 100
        end = start + end_offset
        records.append(UserSegment(start, end, "words here", "Yield"))
        records.append(RobotOnset(end + delay, f"u{start}", label))
        t = end + max(delay, 0) + 100
    return records


class TestResponseTimes:
    def test_single_sample(self):
        log = [session(), UserSegment(0, 1000, "hi", "Yield"), RobotOnset(1600, "u", "clean")]
        stats = response_times(log)
        assert stats.samples == (600,)
        assert (stats.mean, stats.median, stats.mode) == (600, 600, 650)

    def test_all_interruptions_give_empty_stats(self):
        stats = response_times(log_with([(500, 100, "interruption"), (500, 300, "interruption")]))
        assert stats.empty and stats.mean is None and stats.mode is None

    def test_unlabeled_log_is_rejected(self):
        with pytest.raises(MetricsError):
            response_times([UserSegment(0, 10, "a", "Yield")])

    def test_backchannels_are_not_turn_ends(self):
        log = [session(), UserSegment(0, 1000, "hi", "Yield"), UserSegment(1200, 1400, "yeah", "Backchannel"),
               RobotOnset(1500, "u", "clean")]
        assert response_times(log).samples == (500,)

    def test_mode_ties_go_to_the_lower_bin(self):
        stats = ResponseTimeStats.from_samples([550, 560, 1520, 1590])
        assert stats.mode == 550

    def test_negative_samples_are_kept(self):
        assert ResponseTimeStats.from_samples([-120, 30]).histogram == ((-200, 1), (0, 1))

    @given(st.lists(st.integers(-3000, 6000), min_size=1, max_size=60), st.sampled_from([50, 100, 250]))
    def test_histogram_properties(self, samples, bin_ms):
        stats = ResponseTimeStats.from_samples(samples, bin_ms)
        assert sum(c for _, c in stats.histogram) == len(samples)
        assert stats.mode - bin_ms / 2 in dict(stats.histogram)
        top = max(c for _, c in stats.histogram)
        assert stats.mode - bin_ms / 2 == min(b for b, c in stats.histogram if c == top)
        assert stats.mean == pytest.approx(statistics.fmean(samples))
        assert stats.median == statistics.median(samples)

    @given(st.lists(st.tuples(st.integers(100, 3000), st.integers(0, 3000), st.sampled_from(["clean", "interruption"])), max_size=12),
           st.integers(0, 12), st.integers(100, 1000))
    def test_adding_an_interruption_keeps_the_samples(self, onsets, at, delay):
        base = response_times(log_with(onsets)).samples
        onsets = list(onsets)
        onsets.insert(min(at, len(onsets)), (500, delay, "interruption"))
        assert response_times(log_with(onsets)).samples == base

    def test_pure(self):
        log = log_with([(500, 600, "clean"), (800, 2500, "clean")])
        assert response_times(log) == response_times(log)


class TestInterruptionRate:
    def test_ten_onsets_one_interruption(self):
        log = log_with([(500, 600, "clean")] * 9 + [(500, 600, "interruption")])
        report = interruption_rate(log)
        assert (report.robot_onset_count, report.interruption_count, report.rate) == (10, 1, 0.10)

    def test_no_robot_speech_is_flagged(self):
        report = interruption_rate([session()])
        assert report.empty and report.rate == 0.0


class TestAggregateAndCompare:
    def test_rejects_mixed_corpora_and_policies(self):
        with pytest.raises(MetricsError):
            aggregate([log_with([], corpus="a"), log_with([], corpus="b")])
        with pytest.raises(MetricsError):
            aggregate([log_with([], policy="proposed"), log_with([], policy="baseline")])

    def test_compare_with_itself(self):
        report = aggregate([log_with([(500, 600, "clean"), (500, 100, "interruption")])])
        for d in compare(report, report):
            assert d.delta == 0 and d.ratio == 1

    def test_division_by_zero_is_marked(self):
        a = aggregate([log_with([(500, 600, "clean"), (500, 100, "interruption")])])
        b = aggregate([log_with([(500, 600, "clean")], policy="baseline")])
        rate = {d.metric: d for d in compare(a, b)}["interruption_rate"]
        assert rate.ratio is None and rate.division_by_zero
        assert "div/0" in format_compare(compare(a, b))

    def test_compare_needs_the_same_corpus(self):
        a = aggregate([log_with([], corpus="a")])
        b = aggregate([log_with([], corpus="b")])
        with pytest.raises(MetricsError):
            compare(a, b)


class TestFormats:
    def test_table_and_records(self):
        report = aggregate([log_with([(500, 600, "clean"), (500, 2600, "clean")])])
        table = format_table([report])
        assert table.splitlines()[0].split()[:5] == ["policy", "dialogues", "mean", "(s)", "median"]
        assert "1.600" in table
        lines = format_records([report]).splitlines()
        assert {__import__("json").loads(l)["metric"] for l in lines} >= {"response_median_ms", "interruption_rate"}

    def test_histogram_export(self):
        stats = ResponseTimeStats.from_samples([550, 560, 1520])
        assert format_histogram(stats) == "bin_center_ms,count\n550,2\n1550,1\n"

    def test_local_peaks(self):
        stats = ResponseTimeStats.from_samples([550] * 5 + [650] * 2 + [1050] + [1550] * 4)
        assert local_peaks(stats, 500, 700) == [(500, 5)]
        assert local_peaks(stats, 1300, 1700) == [(1500, 4)]
