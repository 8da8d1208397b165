"""Response-time and interruption measures computed from labeled logs.

Every function here is a pure function of its input logs.
"""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .model import LogRecord, RobotOnset, Session, UserSegment

DEFAULT_BIN_MS = 100


class MetricsError(ValueError):
    """The logs cannot be measured (no labels, mixed corpora, ...)."""


@dataclass(frozen=True)
class ResponseTimeStats:
    samples: tuple[int, ...]
    bin_ms: int = DEFAULT_BIN_MS
    histogram: tuple[tuple[int, int], ...] = ()  # (bin start ms, count), ascending
    mean: float | None = None
    median: float | None = None
    mode: float | None = None

    @property
    def empty(self) -> bool:
        return not self.samples

    @classmethod
    def from_samples(cls, samples: Iterable[int], bin_ms: int = DEFAULT_BIN_MS) -> "ResponseTimeStats":
        if bin_ms <= 0:
            raise MetricsError("bin width must be positive")
        values = tuple(sorted(samples))
        if not values:
            return cls((), bin_ms)
        counts = Counter(math.floor(v / bin_ms) * bin_ms for v in values)
        histogram = tuple(sorted(counts.items()))
        # max() keeps the first maximum, and the histogram is ascending: ties go to the lower bin
        top = max(histogram, key=lambda item: item[1])
        return cls(
            values,
            bin_ms,
            histogram,
            mean=statistics.fmean(values),
            median=float(statistics.median(values)),
            mode=top[0] + bin_ms / 2,
        )

    def bin_centers(self) -> list[tuple[float, int]]:
        return [(start + self.bin_ms / 2, count) for start, count in self.histogram]


@dataclass(frozen=True)
class InterruptionReport:
    robot_onset_count: int
    interruption_count: int

    @property
    def empty(self) -> bool:
        return self.robot_onset_count == 0

    @property
    def rate(self) -> float:
        return self.interruption_count / self.robot_onset_count if self.robot_onset_count else 0.0


def _labeled(log: Sequence[LogRecord]) -> list[tuple[RobotOnset, int | None]]:
    """Each onset with the end of the user segment that preceded it."""
    last_end: int | None = None
    out = []
    for record in log:
        if isinstance(record, UserSegment) and record.boundary != "Backchannel":
            last_end = record.t_end
        elif isinstance(record, RobotOnset):
            if record.label not in ("clean", "interruption"):
                raise MetricsError(f"unknown onset label {record.label!r}")
            out.append((record, last_end))
    return out


def _require_labels(log: Sequence[LogRecord]) -> None:
    if not any(isinstance(r, Session) for r in log[:1]):
        raise MetricsError("log has no session header; only simulator logs carry ground-truth labels")


def response_samples(log: Sequence[LogRecord]) -> list[int]:
    _require_labels(log)
    return [
        onset.t - end
        for onset, end in _labeled(log)
        if onset.label == "clean" and end is not None
    ]


def response_times(log: Sequence[LogRecord], bin_ms: int = DEFAULT_BIN_MS) -> ResponseTimeStats:
    return ResponseTimeStats.from_samples(response_samples(log), bin_ms)


def interruption_rate(log: Sequence[LogRecord]) -> InterruptionReport:
    _require_labels(log)
    onsets = _labeled(log)
    return InterruptionReport(len(onsets), sum(1 for o, _ in onsets if o.label == "interruption"))


@dataclass(frozen=True)
class AggregateReport:
    policy: str
    corpus_id: str
    dialogues: int
    response: ResponseTimeStats
    interruptions: InterruptionReport
    scenario_ids: tuple[str, ...] = field(default=())

    def records(self) -> list[dict[str, Any]]:
        """One machine-readable record per metric."""
        base = {"policy": self.policy, "corpus_id": self.corpus_id}
        r = self.response
        values = {
            "dialogues": self.dialogues,
            "response_samples": len(r.samples),
            "response_mean_ms": r.mean,
            "response_median_ms": r.median,
            "response_mode_ms": r.mode,
            "robot_onsets": self.interruptions.robot_onset_count,
            "interruptions": self.interruptions.interruption_count,
            "interruption_rate": None if self.interruptions.empty else self.interruptions.rate,
        }
        return [{**base, "metric": k, "value": v} for k, v in values.items()]


def aggregate(logs: Iterable[Sequence[LogRecord]], bin_ms: int = DEFAULT_BIN_MS) -> AggregateReport:
    """Pool samples and onsets over dialogues of one policy and one corpus."""
    samples: list[int] = []
    onsets = interruptions = 0
    policies, corpora, ids = set(), set(), []
    for log in logs:
        _require_labels(log)
        session: Session = log[0]  # type: ignore[assignment]
        policies.add(session.policy)
        corpora.add(session.corpus_id)
        ids.append(session.scenario_id)
        samples.extend(response_samples(log))
        report = interruption_rate(log)
        onsets += report.robot_onset_count
        interruptions += report.interruption_count
    if not ids:
        raise MetricsError("no logs to aggregate")
    if len(corpora) > 1:
        raise MetricsError(f"logs come from different corpora: {sorted(corpora)}")
    if len(policies) > 1:
        raise MetricsError(f"logs mix policies: {sorted(policies)}")
    return AggregateReport(
        policies.pop(),
        corpora.pop(),
        len(ids),
        ResponseTimeStats.from_samples(samples, bin_ms),
        InterruptionReport(onsets, interruptions),
        tuple(sorted(ids)),
    )


@dataclass(frozen=True)
class MetricDelta:
    metric: str
    a: float | None
    b: float | None

    @property
    def delta(self) -> float | None:
        return None if self.a is None or self.b is None else self.a - self.b

    @property
    def ratio(self) -> float | None:
        if self.a is None or self.b is None or self.b == 0:
            return None
        return self.a / self.b

    @property
    def division_by_zero(self) -> bool:
        return self.a is not None and self.b == 0


def _comparable(report: AggregateReport) -> dict[str, float | None]:
    return {
        "response_mean_ms": report.response.mean,
        "response_median_ms": report.response.median,
        "response_mode_ms": report.response.mode,
        "interruption_rate": None if report.interruptions.empty else report.interruptions.rate,
    }


def compare(a: AggregateReport, b: AggregateReport) -> list[MetricDelta]:
    """Per-metric a - b and a / b; requires both reports to cover the same corpus."""
    if a.corpus_id != b.corpus_id:
        raise MetricsError(f"cannot compare corpus {a.corpus_id!r} with {b.corpus_id!r}")
    va, vb = _comparable(a), _comparable(b)
    return [MetricDelta(k, va[k], vb[k]) for k in va]


# ---------------------------------------------------------------------------
# Output formats
# ---------------------------------------------------------------------------


def _fmt(value: float | None, scale: float = 1.0, digits: int = 3) -> str:
    return "n/a" if value is None else f"{value / scale:.{digits}f}"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(row, widths)))
             for row in [header, *rows]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_table(reports: Sequence[AggregateReport]) -> str:
    header = ["policy", "dialogues", "mean (s)", "median (s)", "mode (s)", "onsets", "interruption rate"]
    rows = [
        [
            r.policy,
            str(r.dialogues),
            _fmt(r.response.mean, 1000),
            _fmt(r.response.median, 1000),
            _fmt(r.response.mode, 1000),
            str(r.interruptions.robot_onset_count),
            "n/a" if r.interruptions.empty else f"{r.interruptions.rate:.3f}",
        ]
        for r in reports
    ]
    return _table(header, rows)


def format_compare(deltas: Sequence[MetricDelta], a_name: str = "a", b_name: str = "b") -> str:
    header = ["metric", a_name, b_name, "delta", "ratio"]
    rows = [
        [d.metric, _fmt(d.a), _fmt(d.b), _fmt(d.delta), "div/0" if d.division_by_zero else _fmt(d.ratio)]
        for d in deltas
    ]
    return _table(header, rows)


def format_histogram(stats: ResponseTimeStats, delimiter: str = ",") -> str:
    lines = [f"bin_center_ms{delimiter}count"]
    lines += [f"{center:g}{delimiter}{count}" for center, count in stats.bin_centers()]
    return "\n".join(lines) + "\n"


def format_records(reports: Sequence[AggregateReport], deltas: Sequence[MetricDelta] = ()) -> str:
    lines = [json.dumps(rec, sort_keys=True) for r in reports for rec in r.records()]
    for d in deltas:
        lines.append(
            json.dumps(
                {"metric": f"compare.{d.metric}", "a": d.a, "b": d.b, "delta": d.delta, "ratio": d.ratio,
                 "division_by_zero": d.division_by_zero},
                sort_keys=True,
            )
        )
    return "\n".join(lines) + "\n"


def local_peaks(stats: ResponseTimeStats, lo_ms: int, hi_ms: int) -> list[tuple[int, int]]:
    """Bins in [lo, hi) whose count is at least each neighbor's and strictly above one of them."""
    counts = dict(stats.histogram)
    out = []
    for start in range(math.floor(lo_ms / stats.bin_ms) * stats.bin_ms, hi_ms, stats.bin_ms):
        c = counts.get(start, 0)
        left, right = counts.get(start - stats.bin_ms, 0), counts.get(start + stats.bin_ms, 0)
        if c and c >= left and c >= right and (c > left or c > right):
            out.append((start, c))
    return out
