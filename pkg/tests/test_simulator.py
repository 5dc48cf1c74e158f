from collections import defaultdict

import numpy as np
import pytest

from adcount.aggregator import threshold_of_counts
from adcount.client import ClientWeekState, Decision, ThresholdMode
from adcount.errors import ConfigError, ConfigParseError
from adcount.simulator import (
    CSV_COLUMNS,
    PRESETS,
    SimConfig,
    ad_key,
    cleartext_counts,
    compare_threshold_pipelines,
    confusion,
    format_config,
    generate_world,
    parse_config,
    rows_to_csv,
    run_experiment,
    simulate_week,
    sweep,
)

SMALL = SimConfig(num_users=40, num_websites=120, avg_user_visits=30, num_campaigns=60,
                  max_static_reach=30, oprf_bits=512)


def test_defaults():
    cfg = SimConfig()
    assert (cfg.num_users, cfg.num_websites, cfg.avg_user_visits, cfg.avg_ads_per_site) == (500, 1000, 138, 20)
    assert cfg.targeted_fraction == 0.1
    world = generate_world(cfg)
    kinds = [c.targeted for c in world.campaigns()]
    assert sum(kinds) == 50 and len(kinds) == 500
    assert world.user_cluster.size == 500 and world.site_popularity.size == 1000


def test_mean_visits_close_to_config():
    means = [simulate_week(generate_world(SimConfig(seed=s))).visits_per_user.mean() for s in range(5)]
    assert abs(np.mean(means) - 138) <= 0.05 * 138


def test_seed_determinism():
    a, b = generate_world(SMALL), generate_world(SMALL)
    c = generate_world(SMALL.replace(seed=1))
    assert np.array_equal(a.inventory, b.inventory) and a.campaigns() == b.campaigns()
    assert a.campaigns() != c.campaigns()
    wa, wb = simulate_week(a), simulate_week(b)
    assert np.array_equal(wa.imp_campaign, wb.imp_campaign)
    assert np.array_equal(wa.pair_domains, wb.pair_domains)


def test_zipf_popularity():
    world = generate_world(SimConfig())
    p = world.site_popularity
    assert p[0] / p[9] == pytest.approx(10)
    assert p.sum() == pytest.approx(1)


def test_impression_totals_and_cap_bound():
    cfg = SimConfig(frequency_cap=4, seed=3)
    world = generate_world(cfg)
    week = simulate_week(world)
    assert week.imp_visit.size == int(world.site_slots[week.visit_site].sum())
    # visits pile onto the popular sites, so the oracle weights slots by popularity
    expected = week.visit_user.size * float(world.site_popularity @ world.site_slots)
    assert abs(week.imp_visit.size - expected) < 0.02 * expected
    assert abs(world.site_slots.mean() - cfg.avg_ads_per_site) < 0.05 * cfg.avg_ads_per_site
    targeting = defaultdict(int)
    for c in world.campaigns():
        for u in c.audience:
            targeting[u] += 1
    per_user = defaultdict(int)
    for (u, c), n in week.targeted_impressions().items():
        assert n <= cfg.frequency_cap
        per_user[u] += n
    assert all(n <= cfg.frequency_cap * targeting[u] for u, n in per_user.items())


def test_cap_one_is_undetectable():
    cfg = SimConfig(frequency_cap=1)
    week = simulate_week(generate_world(cfg))
    assert week.pair_domains[week.truly_targeted].max() == 1
    result = run_experiment(cfg)
    assert result.fn_rate == 1.0


def test_higher_cap_only_adds_impressions():
    low = simulate_week(generate_world(SimConfig(frequency_cap=3))).targeted_impressions()
    high = simulate_week(generate_world(SimConfig(frequency_cap=6))).targeted_impressions()
    overwritten = sum(1 for k in low if high.get(k, 0) < low[k])
    assert overwritten <= 0.01 * len(low)


def reference_decisions(week, mode):
    """Client-module classifier over the simulated observation logs."""
    counts = cleartext_counts(week)
    users_th = threshold_of_counts(counts[counts > 0], mode)
    by_key = {ad_key(c): int(n) for c, n in enumerate(counts)}
    out = {}
    for user, log in week.observation_logs().items():
        st = ClientWeekState(0)
        st.record_all(log)
        for ad, d in st.classify_all(by_key, users_th, mode).items():
            out[(user - 1, int(ad.rsplit("/", 1)[1]))] = d
    return out


@pytest.mark.parametrize("mode", list(ThresholdMode))
@pytest.mark.parametrize("cap", [2, 6])
def test_vectorized_classifier_matches_client_module(mode, cap):
    cfg = SMALL.replace(frequency_cap=cap, mode=mode)
    week = simulate_week(generate_world(cfg))
    ref = reference_decisions(week, mode)
    truth = {(int(u), int(c)): c >= week.world.num_static for u, c in zip(week.pair_user, week.pair_campaign)}
    assert set(ref) == set(truth)
    expected = dict(tp=0, fp=0, tn=0, fn=0, insufficient=0)
    for pair, d in ref.items():
        if d is Decision.INSUFFICIENT_DATA:
            expected["insufficient"] += 1
        elif d is Decision.TARGETED:
            expected["tp" if truth[pair] else "fp"] += 1
        else:
            expected["fn" if truth[pair] else "tn"] += 1
    counts = cleartext_counts(week)
    got = confusion(week, counts, threshold_of_counts(counts[counts > 0], mode), mode)
    assert got.__dict__ == expected


def test_insufficient_users_excluded():
    cfg = SMALL.replace(avg_user_visits=3)
    result = run_experiment(cfg)
    assert result.insufficient_fraction > 0
    c = result.counts
    assert c.tp + c.fp + c.tn + c.fn + c.insufficient == len(simulate_week(generate_world(cfg)).pair_user)


def test_privacy_pipeline_on_small_world():
    cmp = compare_threshold_pipelines(SMALL.replace(seed=2))
    assert cmp.users_th_cms >= cmp.users_th_clear
    assert cmp.exact_fraction >= 0.95
    off = run_experiment(SMALL.replace(seed=2))
    on = run_experiment(SMALL.replace(seed=2, privacy=True))
    assert off.users_th_cms is None
    assert on.users_th_clear == off.users_th_clear == float(cmp.users_th_clear)
    assert on.users_th_cms == float(cmp.users_th_cms)


def test_campaigns_meaning_shows_whole_inventory():
    cfg = SMALL.replace(ads_per_site_meaning="campaigns", targeted_fraction=0.0)
    world = generate_world(cfg)
    week = simulate_week(world)
    per_visit = np.bincount(week.imp_visit, minlength=week.visit_user.size)
    assert np.array_equal(per_visit, np.diff(world.inventory_ptr)[week.visit_site])
    assert run_experiment(cfg).counts.tp == 0


def test_stress_preset_false_positives_bounded():
    result = run_experiment(SimConfig(**PRESETS["stress"]))
    assert result.fp_rate <= 0.02


def test_config_round_trip_and_errors():
    cfg = SimConfig(frequency_cap=9, mode="mean-median", privacy=True, seed=4)
    assert parse_config(format_config(cfg)) == cfg
    text = "# comment\nnum_users = 50  # trailing\npreset = stress\n"
    parsed = parse_config(text)
    assert parsed.num_users == 50 and parsed.niche_sites == PRESETS["stress"]["niche_sites"]
    cases = [
        ("num_users = 5\nbogus = 1\n", 2, 1),
        ("  frequency_cap = seven\n", 1, 19),
        ("privacy = maybe\n", 1, 11),
        ("just words\n", 1, 11),
        ("mode = max\n", 1, 8),
    ]
    for text, line, column in cases:
        with pytest.raises(ConfigParseError) as info:
            parse_config(text)
        assert (info.value.line, info.value.column) == (line, column), text
    with pytest.raises(ConfigError):
        SimConfig(targeted_fraction=1.5)


def test_sweep_rows_and_csv_determinism():
    rows = sweep(SMALL, "frequency_cap", [1, 2, 3], seeds=[0, 1])
    assert len(rows) == 6
    assert [(r.value, r.seed) for r in rows] == [(v, s) for v in ("1", "2", "3") for s in (0, 1)]
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert rows_to_csv(sweep(SMALL, "frequency_cap", [1, 2, 3], seeds=[0, 1])) == text
    modes = sweep(SMALL, "mode", ["mean", "mean-median"], seeds=[0])
    assert [r.value for r in modes] == ["mean", "mean-median"]
    with pytest.raises(ConfigError):
        sweep(SMALL, "num_websites", [1], [0])
