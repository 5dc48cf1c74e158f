import io
import random
from collections import defaultdict
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adcount import blinding as bl
from adcount.client import (
    WINDOW_SECONDS,
    AdObservation,
    ClientWeekState,
    Decision,
    ThresholdMode,
    canonical_ad_key,
    decide,
    format_replay,
    read_replay,
    registrable_domain,
    threshold,
)
from adcount.errors import ReplayParseError, StaleObservationError
from adcount.groups import ModPGroup
from adcount.sketch import SketchParams

PARAMS = SketchParams(0.01, 0.01, 1000)


def counting_mapper():
    calls = []

    def mapper(ad):
        calls.append(ad)
        return (hash(ad) % 1000) + 1

    return mapper, calls


def obs(ad, domain, t=10.0):
    return AdObservation(ad=ad, domain=domain, timestamp=t)


@pytest.mark.parametrize("raw, expected", [
    ("HTTPS://Shop.Example.COM/Landing?a=1#frag", "https://shop.example.com/Landing?a=1"),
    ("  img-key-42 ", "img-key-42"),
])
def test_canonical_ad_key(raw, expected):
    assert canonical_ad_key(raw) == expected


@pytest.mark.parametrize("host, expected", [
    ("www.News.example.com", "example.com"),
    ("example.com", "example.com"),
    ("a.b.example.co.uk", "example.co.uk"),
    ("https://blog.site.org:8080/path", "site.org"),
    ("192.168.0.1", "192.168.0.1"),
    ("localhost", "localhost"),
])
def test_registrable_domain(host, expected):
    assert registrable_domain(host) == expected


def test_empty_fields_rejected():
    with pytest.raises(ValueError):
        obs("", "a.com")
    with pytest.raises(ValueError):
        obs("ad", " ")


def test_same_ad_domain_twice_changes_nothing():
    mapper, calls = counting_mapper()
    st_ = ClientWeekState(0, PARAMS, mapper)
    st_.record_observation(obs("ad1", "a.com"))
    before = st_.sketch.copy()
    st_.record_observation(obs("ad1", "a.com", 20))
    assert st_.domains_count("ad1") == 1
    assert st_.sketch == before
    assert calls == ["ad1"]


def test_three_domains_one_insertion():
    mapper, calls = counting_mapper()
    st_ = ClientWeekState(0, PARAMS, mapper)
    for d in ("a.com", "b.com", "c.com"):
        st_.record_observation(obs("ad1", d))
    assert st_.domains_count("ad1") == 3
    assert st_.insertions == 1 and st_.sketch.total == 1
    assert st_.domains_count("unseen") == 0


def test_35_distinct_ads_give_35_insertions():
    mapper, calls = counting_mapper()
    st_ = ClientWeekState(0, PARAMS, mapper)
    for i in range(35):
        st_.record_observation(obs(f"ad{i}", f"site{i % 6}.com"))
        st_.record_observation(obs(f"ad{i}", f"site{(i + 1) % 6}.com"))
    assert st_.insertions == 35 == st_.sketch.total
    assert len(calls) == 35


def test_window_bounds():
    st_ = ClientWeekState(1000.0)
    with pytest.raises(StaleObservationError):
        st_.record_observation(obs("x", "a.com", 999.0))
    with pytest.raises(ValueError):
        st_.record_observation(obs("x", "a.com", 1000.0 + WINDOW_SECONDS))
    st_.record_observation(obs("x", "a.com", 1000.0))
    st_.advance_window(1000.0 + WINDOW_SECONDS)
    assert st_.domains_count("x") == 0
    with pytest.raises(StaleObservationError):
        st_.record_observation(obs("x", "a.com", 1500.0))


def test_threshold_examples():
    assert threshold([1, 1, 1, 5], ThresholdMode.MEAN) == 2
    assert threshold([1, 1, 1, 5], ThresholdMode.MEAN_PLUS_MEDIAN) == 3
    assert threshold([1, 2], "mean") == Fraction(3, 2)
    assert threshold([1, 1, 4], "mean-median") == 3
    with pytest.raises(ValueError):
        threshold([], ThresholdMode.MEAN)


def test_domains_threshold_needs_four_domains():
    st_ = ClientWeekState(0)
    for d in ("a.com", "b.com", "c.com"):
        st_.record_observation(obs("ad", d))
    assert st_.domains_threshold() is None
    assert st_.classify("ad", 1, Fraction(100)) is Decision.INSUFFICIENT_DATA
    st_.record_observation(obs("other", "d.com"))
    assert st_.domains_threshold() == 2


def test_constant_distribution_threshold():
    st_ = ClientWeekState(0)
    for i, pair in enumerate([("a.com", "b.com"), ("c.com", "d.com"), ("a.com", "d.com")]):
        for d in pair:
            st_.record_observation(obs(f"ad{i}", d))
    assert st_.domains_threshold(ThresholdMode.MEAN) == 2


@pytest.mark.parametrize("dc, dth, uc, uth, expected", [
    (1, Fraction(2), 0, Fraction(10), Decision.NON_TARGETED),
    (5, Fraction(2), 1, Fraction(10), Decision.TARGETED),
    (2, Fraction(2), 1, Fraction(10), Decision.NON_TARGETED),  # tie on domains
    (5, Fraction(2), 10, Fraction(10), Decision.NON_TARGETED),  # tie on users
    (5, None, 1, Fraction(10), Decision.INSUFFICIENT_DATA),
])
def test_decide(dc, dth, uc, uth, expected):
    assert decide(dc, dth, uc, uth) is expected


def brute_force_decisions(log, users_counts, users_th):
    """Reference classifier straight from the raw log."""
    per_ad = defaultdict(set)
    domains = set()
    for o in log:
        per_ad[o.ad].add(o.domain)
        domains.add(o.domain)
    if len(domains) < 4:
        return {ad: Decision.INSUFFICIENT_DATA for ad in per_ad}
    counts = [len(v) for v in per_ad.values()]
    mean = Fraction(sum(counts), len(counts))
    out = {}
    for ad, ds in per_ad.items():
        hit = len(ds) > mean and users_counts.get(ad, 0) < users_th
        out[ad] = Decision.TARGETED if hit else Decision.NON_TARGETED
    return out


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 7)), max_size=120), st.integers(0, 2**32))
def test_state_matches_brute_force(pairs, seed):
    rng = random.Random(seed)
    log = [obs(f"ad{a}", f"d{d}.com", float(i)) for i, (a, d) in enumerate(pairs)]
    users_counts = {f"ad{a}": rng.randrange(0, 20) for a in range(16)}
    users_th = Fraction(rng.randrange(1, 40), rng.randrange(1, 4))
    mapper, calls = counting_mapper()
    st_ = ClientWeekState(0, PARAMS, mapper)
    st_.record_all(log)
    assert st_.insertions == len({o.ad for o in log}) == len(calls)
    for ad in users_counts:
        assert st_.domains_count(ad) == len({o.domain for o in log if o.ad == ad})
    assert st_.classify_all(users_counts, users_th) == brute_force_decisions(log, users_counts, users_th)


def test_reports_of_two_users_aggregate_to_counts():
    group = ModPGroup.toy()
    kps = [bl.keygen(group, seed=i, index=i) for i in (1, 2)]
    roster = bl.Roster.from_keypairs(kps, 3)
    ids = {"shared": 11, "only1": 22, "only2": 33}
    states = [ClientWeekState(0, PARAMS, ids.get) for _ in kps]
    states[0].record_observation(obs("shared", "a.com"))
    states[0].record_observation(obs("only1", "a.com"))
    states[1].record_observation(obs("shared", "b.com"))
    states[1].record_observation(obs("only2", "b.com"))
    reports = [s.build_report(kp, roster) for s, kp in zip(states, kps)]
    agg = bl.unblind_aggregate(reports, PARAMS, roster.indices)
    assert agg.query(11) == 2 and agg.query(22) == 1 and agg.query(33) == 1
    assert reports[0].byte_length == bl.REPORT_HEADER_SIZE + PARAMS.payload_bytes


def test_empty_user_report_and_adjusted_report():
    group = ModPGroup.toy()
    kps = [bl.keygen(group, seed=i, index=i) for i in (1, 2, 3)]
    roster = bl.Roster.from_keypairs(kps, 8)
    states = [ClientWeekState(0, PARAMS, lambda ad: 5) for _ in kps]
    states[0].record_observation(obs("x", "a.com"))
    first = [s.build_report(kp, roster) for s, kp in zip(states, kps)]
    assert first[2].cells.any()  # blinded zero sketch is not zero
    adjusted = [s.build_adjusted_report(kp, roster, {2}) for s, kp in zip(states, kps) if kp.index != 2]
    agg = bl.unblind_aggregate(adjusted, PARAMS, [1, 3])
    assert agg.query(5) == 1 and agg.total == 1


def test_replay_round_trip_and_errors():
    log = [obs("https://x.example/a", "www.a.com", 1.5), obs("img:7", "b.org", 2)]
    text = "# header\n\n" + format_replay(log)
    assert read_replay(io.StringIO(text)) == log
    with pytest.raises(ReplayParseError) as info:
        read_replay(io.StringIO("1\ta.com\tad\nnot-a-number\ta.com\tad\n"))
    assert info.value.line == 2
    with pytest.raises(ReplayParseError) as info:
        read_replay(io.StringIO("1\ta.com\n"))
    assert info.value.line == 1
