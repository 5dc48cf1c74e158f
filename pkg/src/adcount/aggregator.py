"""Server side of a weekly round.

The round collects one blinded report per roster member. If anyone is still
silent at the deadline the server publishes the missing list and waits for
adjusted reports from the survivors (one retry only). The unblinded aggregate
is then probed over the whole id space to get the per-ad user counts, whose
mean (or mean + median) is the global users threshold.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from .blinding import BlindedReport, Roster, unblind_aggregate
from .client import ThresholdMode
from .errors import (
    DuplicateReportError,
    EmptyDistributionError,
    IncompleteRosterError,
    RoundError,
    UnknownSenderError,
    WrongRoundError,
)
from .sketch import CountMinSketch, SketchParams

_PROBE_CHUNK = 1 << 16


class Phase(str, Enum):
    COLLECTING = "collecting"
    ADJUSTING = "adjusting"
    FINALIZED = "finalized"


class Source(str, Enum):
    CLEARTEXT = "cleartext"
    SKETCH = "sketch"


class RoundState:
    """Report bookkeeping for one round tag. Phases only move forward."""

    MAX_RETRY = 1

    def __init__(self, roster: Roster, params: SketchParams):
        self.roster = roster
        self.params = params
        self.phase = Phase.COLLECTING
        self.retry = 0
        self.reports: dict[int, BlindedReport] = {}
        self.missing: list[int] = []
        self.aggregate: CountMinSketch | None = None

    @property
    def round_tag(self) -> int:
        return self.roster.round_tag

    @property
    def expected(self) -> list[int]:
        return [i for i in self.roster.indices if i not in self.missing]

    def collect(self, report: BlindedReport) -> None:
        if self.phase is Phase.FINALIZED:
            raise RoundError("round already finalized")
        if report.round_tag != self.round_tag:
            raise WrongRoundError(f"report for round {report.round_tag}, expected {self.round_tag}")
        if report.user_index not in self.expected:
            raise UnknownSenderError(f"user {report.user_index} is not expected in this phase")
        if report.retry != self.retry:
            raise WrongRoundError(f"report retry {report.retry}, expected {self.retry}")
        if report.user_index in self.reports:
            raise DuplicateReportError(f"second report from user {report.user_index}")
        self.reports[report.user_index] = report

    @property
    def complete(self) -> bool:
        return len(self.reports) == len(self.expected)

    def detect_missing(self) -> list[int]:
        """Roster members without a report in the current phase; call at the deadline."""
        return sorted(set(self.expected) - set(self.reports))

    def begin_adjustment(self, missing: Iterable[int]) -> list[int]:
        """Drop ``missing`` and reopen collection for adjusted reports."""
        if self.phase is not Phase.COLLECTING or self.retry >= self.MAX_RETRY:
            raise RoundError("only one adjustment per round")
        missing = sorted(set(missing))
        if not missing:
            raise RoundError("nothing to adjust")
        if len(missing) >= self.roster.size:
            raise IncompleteRosterError(missing=missing)
        self.missing = missing
        self.retry += 1
        self.phase = Phase.ADJUSTING
        self.reports = {}
        return missing

    def finalize(self) -> CountMinSketch:
        if self.phase is Phase.FINALIZED:
            return self.aggregate
        if not self.reports:
            raise IncompleteRosterError(missing=self.expected or self.roster.indices)
        self.aggregate = unblind_aggregate(list(self.reports.values()), self.params, self.expected)
        self.phase = Phase.FINALIZED
        return self.aggregate


@dataclass(frozen=True)
class UsersDistribution:
    """Estimated user count per ad id, for ids with a nonzero count."""

    counts: Mapping[int, int]
    a_size: int
    source: Source

    def __len__(self) -> int:
        return len(self.counts)

    def values(self) -> list[int]:
        return list(self.counts.values())


def users_distribution(aggregate: CountMinSketch, a_size: int) -> UsersDistribution:
    """Probe every id in ``[1, a_size]`` and keep those with estimate >= 1."""
    counts: dict[int, int] = {}
    if aggregate.total:
        for start in range(1, a_size + 1, _PROBE_CHUNK):
            ids = np.arange(start, min(start + _PROBE_CHUNK, a_size + 1), dtype=np.uint64)
            est = aggregate.query_many(ids)
            hit = np.flatnonzero(est)
            counts.update(zip(ids[hit].tolist(), est[hit].tolist()))
    return UsersDistribution(counts, a_size, Source.SKETCH)


def cleartext_distribution(user_id_sets: Iterable[Iterable[int]], a_size: int) -> UsersDistribution:
    """Exact counts from each user's set of ids; the reference for the sketch path."""
    counts: dict[int, int] = {}
    for ids in user_id_sets:
        for i in set(ids):
            counts[i] = counts.get(i, 0) + 1
    return UsersDistribution(dict(sorted(counts.items())), a_size, Source.CLEARTEXT)


def threshold_of_counts(values, mode: ThresholdMode) -> Fraction:
    values = np.asarray(values, dtype=np.int64)
    if values.size == 0:
        raise EmptyDistributionError("users threshold of an empty distribution")
    result = Fraction(int(values.sum()), int(values.size))
    if ThresholdMode(mode) is ThresholdMode.MEAN_PLUS_MEDIAN:
        result += Fraction(statistics.median(sorted(values.tolist())))
    return result


def users_threshold(dist: UsersDistribution, mode: ThresholdMode = ThresholdMode.MEAN) -> Fraction:
    return threshold_of_counts(dist.values(), mode)


@dataclass(frozen=True)
class ThresholdBroadcast:
    round_tag: int
    users_th: Fraction
    mode: ThresholdMode


def broadcast_threshold(round_state: RoundState, users_th: Fraction,
                        mode: ThresholdMode) -> ThresholdBroadcast:
    if round_state.phase is not Phase.FINALIZED:
        raise RoundError("threshold broadcast before finalization")
    return ThresholdBroadcast(round_state.round_tag, users_th, ThresholdMode(mode))


def users_count(aggregate: CountMinSketch, ad_ids: Iterable[int]) -> list[int]:
    """Per-ad user counts served to clients straight from the aggregate."""
    ids = list(ad_ids)
    if not ids:
        return []
    return [int(v) for v in aggregate.query_many(np.asarray(ids, dtype=np.uint64))]
