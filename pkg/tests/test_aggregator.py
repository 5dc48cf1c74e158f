import random
from fractions import Fraction

import numpy as np
import pytest

from adcount import blinding as bl
from adcount.aggregator import (
    Phase,
    RoundState,
    Source,
    UsersDistribution,
    broadcast_threshold,
    cleartext_distribution,
    users_count,
    users_distribution,
    users_threshold,
)
from adcount.client import ThresholdMode
from adcount.errors import (
    DuplicateReportError,
    EmptyDistributionError,
    IncompleteRosterError,
    RoundError,
    UnknownSenderError,
    WrongRoundError,
)
from adcount.groups import ModPGroup
from adcount.sketch import CountMinSketch, SketchParams

PARAMS = SketchParams(0.001, 0.001, 10_000)


def setup(n, round_tag=5, seed=0):
    rng = random.Random(seed)
    kps = [bl.keygen(ModPGroup.toy(), seed=i, index=i) for i in range(1, n + 1)]
    roster = bl.Roster.from_keypairs(kps, round_tag)
    id_sets = [set(rng.sample(range(1, 500), rng.randrange(1, 30))) for _ in kps]
    sketches = []
    for ids in id_sets:
        s = CountMinSketch(PARAMS)
        s.update_many(sorted(ids))
        sketches.append(s)
    return kps, roster, id_sets, sketches


def reports_for(kps, roster, sketches, missing=(), retry=0):
    out = []
    for kp, s in zip(kps, sketches):
        if kp.index in missing:
            continue
        bv = bl.adjust_blinding(kp, roster, missing, PARAMS.cell_count, retry)
        out.append(bl.blind_cells(s, bv, kp.index))
    return out


def merged(sketches):
    total = CountMinSketch(PARAMS)
    for s in sketches:
        total = total.merge(s)
    return total


def test_collect_errors():
    kps, roster, _, sketches = setup(3)
    rs = RoundState(roster, PARAMS)
    reports = reports_for(kps, roster, sketches)
    rs.collect(reports[0])
    with pytest.raises(DuplicateReportError):
        rs.collect(reports[0])
    stale = bl.BlindedReport(4, 0, 2, PARAMS.digest(), reports[1].cells)
    with pytest.raises(WrongRoundError):
        rs.collect(stale)
    stranger = bl.BlindedReport(5, 0, 9, PARAMS.digest(), reports[1].cells)
    with pytest.raises(UnknownSenderError):
        rs.collect(stranger)
    assert rs.detect_missing() == [2, 3]
    rs.collect(reports[1])
    rs.collect(reports[2])
    assert rs.detect_missing() == [] and rs.complete
    assert rs.finalize() == merged(sketches)
    assert rs.phase is Phase.FINALIZED
    with pytest.raises(RoundError):
        rs.collect(reports[0])


def test_adjustment_recovers_survivor_merge():
    kps, roster, _, sketches = setup(8)
    rs = RoundState(roster, PARAMS)
    for r in reports_for(kps, roster, sketches):
        if r.user_index not in (3, 7):
            rs.collect(r)
    assert rs.detect_missing() == [3, 7]
    rs.begin_adjustment([3, 7])
    assert rs.phase is Phase.ADJUSTING
    late = bl.blind_cells(sketches[2], bl.adjust_blinding(kps[2], roster, [7], PARAMS.cell_count), 3)
    with pytest.raises(UnknownSenderError):
        rs.collect(late)
    with pytest.raises(WrongRoundError):
        rs.collect(reports_for(kps, roster, sketches)[0])  # first-phase report in the adjustment phase
    for r in reports_for(kps, roster, sketches, (3, 7), 1):
        rs.collect(r)
    with pytest.raises(RoundError):
        rs.begin_adjustment([1])
    survivors = [s for kp, s in zip(kps, sketches) if kp.index not in (3, 7)]
    assert rs.finalize() == merged(survivors)


def test_silent_twice_cannot_finalize():
    kps, roster, _, sketches = setup(4)
    rs = RoundState(roster, PARAMS)
    rs.begin_adjustment([2])
    for r in reports_for(kps, roster, sketches, (2,), 1)[:-1]:
        rs.collect(r)
    with pytest.raises(IncompleteRosterError):
        rs.finalize()


def test_single_and_zero_client_rounds():
    kps, roster, _, sketches = setup(1)
    rs = RoundState(roster, PARAMS)
    rs.collect(reports_for(kps, roster, sketches)[0])
    assert rs.finalize() == sketches[0]
    kps, roster, _, _ = setup(2)
    with pytest.raises(IncompleteRosterError):
        RoundState(roster, PARAMS).finalize()


def test_distribution_matches_exact_counts():
    kps, roster, id_sets, sketches = setup(10, seed=3)
    agg = merged(sketches)
    dist = users_distribution(agg, 1 << 12)
    exact = cleartext_distribution(id_sets, 1 << 12)
    assert dist.source is Source.SKETCH and exact.source is Source.CLEARTEXT
    assert set(exact.counts) <= set(dist.counts)
    assert all(dist.counts[i] >= c for i, c in exact.counts.items())
    assert np.mean([dist.counts[i] == c for i, c in exact.counts.items()]) >= 0.95
    assert users_threshold(dist) >= users_threshold(exact)


def test_shared_ad_counts_two():
    a, b = CountMinSketch(PARAMS), CountMinSketch(PARAMS)
    a.update_many([7, 100])
    b.update_many([7, 200])
    dist = users_distribution(a.merge(b), 1000)
    assert dist.counts == {7: 2, 100: 1, 200: 1}


def test_empty_aggregate():
    dist = users_distribution(CountMinSketch(PARAMS), 1 << 20)
    assert len(dist) == 0
    with pytest.raises(EmptyDistributionError):
        users_threshold(dist)


@pytest.mark.parametrize("counts, mean, mm", [
    ({1: 1, 2: 1, 3: 4}, 2, 3),
    ({1: 5, 2: 5}, 5, 10),
    ({1: 1, 2: 2}, Fraction(3, 2), 3),
])
def test_users_threshold(counts, mean, mm):
    dist = UsersDistribution(counts, 10, Source.CLEARTEXT)
    assert users_threshold(dist, ThresholdMode.MEAN) == mean
    assert users_threshold(dist, ThresholdMode.MEAN_PLUS_MEDIAN) == mm


def test_broadcast_and_users_count():
    kps, roster, _, sketches = setup(2)
    rs = RoundState(roster, PARAMS)
    with pytest.raises(RoundError):
        broadcast_threshold(rs, Fraction(2), ThresholdMode.MEAN)
    for r in reports_for(kps, roster, sketches):
        rs.collect(r)
    agg = rs.finalize()
    msg = broadcast_threshold(rs, Fraction(2), "mean")
    assert msg.round_tag == 5 and msg.mode is ThresholdMode.MEAN
    ids = [1, 50, 10**9]
    assert users_count(agg, ids) == [agg.query(i) for i in ids]
    assert all(c >= 0 for c in users_count(agg, ids))
    assert users_count(agg, []) == []
