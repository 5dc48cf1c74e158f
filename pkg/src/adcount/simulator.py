"""Synthetic ad ecosystem for measuring detection rates.

World model (every knob is a ``SimConfig`` field):

* sites have Zipf popularity and a Poisson number of ad slots per page view;
* static campaigns are placed on a log-uniform number of random sites and
  fill slots irrespective of who is looking;
* targeted campaigns pick an audience from one of the interest clusters and
  show their ad on up to ``frequency_cap`` distinct visits of each member,
  replacing a random slot of that page view;
* users make a Poisson number of visits per week, each to a site drawn by
  popularity.

The "stress" preset sends a share of users to a small set of niche sites that
all run the same few static campaigns, which is the situation most likely to
make a static ad look targeted.

Classification follows the client rule exactly but vectorized over all
(user, ad) pairs, with integer arithmetic in place of rational thresholds.
With ``privacy`` on, user counts come from the blinded sketch aggregate
instead of exact counting.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .aggregator import RoundState, threshold_of_counts, users_distribution, users_threshold
from .blinding import Roster, blind_cells, blinding_vectors_batch
from .client import WINDOW_SECONDS, AdObservation, ThresholdMode
from .errors import ConfigError, ConfigParseError
from .harness import derive_seed, infrastructure
from .oprf import InProcessTransport, OprfClient, OprfServer, oprf_keygen
from .sketch import CountMinSketch, SketchParams

SWEEPABLE = ("frequency_cap", "num_users", "mode", "targeted_fraction")
CSV_COLUMNS = ("parameter", "value", "seed", "fn_rate", "fp_rate", "insufficient_fraction",
               "users_th_clear", "users_th_cms")
MIN_AD_DOMAINS = 4


@dataclass(frozen=True)
class SimConfig:
    num_users: int = 500
    num_websites: int = 1000
    avg_user_visits: float = 138.0
    avg_ads_per_site: float = 20.0
    targeted_fraction: float = 0.1
    frequency_cap: int = 7
    mode: ThresholdMode = ThresholdMode.MEAN
    weeks: int = 1
    seed: int = 0
    privacy: bool = False
    # world model
    num_campaigns: int = 500
    zipf_exponent: float = 1.0
    interest_clusters: int = 10
    max_static_reach: int = 200
    audience_min: float = 0.1
    audience_max: float = 0.6
    ads_per_site_meaning: str = "slots"
    # niche browsing (stress preset)
    niche_user_fraction: float = 0.0
    niche_sites: int = 0
    niche_campaigns: int = 0
    niche_visit_prob: float = 0.8
    # privacy pipeline
    epsilon: float = 0.001
    delta: float = 0.001
    capacity: int = 100_000
    a_size: int = 1 << 20
    key_seed: int = 0
    oprf_bits: int = 2048

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", ThresholdMode(self.mode))
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.num_users >= 1, "num_users must be >= 1"),
            (self.num_websites >= 1, "num_websites must be >= 1"),
            (self.avg_user_visits > 0, "avg_user_visits must be > 0"),
            (self.avg_ads_per_site > 0, "avg_ads_per_site must be > 0"),
            (0 <= self.targeted_fraction < 1, "targeted_fraction must be in [0, 1)"),
            (self.frequency_cap >= 0, "frequency_cap must be >= 0"),
            (self.weeks >= 1, "weeks must be >= 1"),
            (self.num_campaigns >= 2, "num_campaigns must be >= 2"),
            (self.zipf_exponent >= 0, "zipf_exponent must be >= 0"),
            (self.interest_clusters >= 1, "interest_clusters must be >= 1"),
            (self.max_static_reach >= 1, "max_static_reach must be >= 1"),
            (0 < self.audience_min <= self.audience_max <= 1, "need 0 < audience_min <= audience_max <= 1"),
            (self.ads_per_site_meaning in ("slots", "campaigns"), "ads_per_site_meaning is slots or campaigns"),
            (0 <= self.niche_user_fraction <= 1, "niche_user_fraction must be in [0, 1]"),
            (0 <= self.niche_sites <= self.num_websites, "niche_sites must be in [0, num_websites]"),
            (self.niche_campaigns >= 0, "niche_campaigns must be >= 0"),
            (0 <= self.niche_visit_prob <= 1, "niche_visit_prob must be in [0, 1]"),
            (not (self.niche_user_fraction and not self.niche_sites), "niche users need niche_sites > 0"),
            (self.a_size >= 1, "a_size must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.num_static < 1:
            raise ConfigError("need at least one static campaign")
        if self.niche_campaigns > self.num_static:
            raise ConfigError("niche_campaigns exceeds the number of static campaigns")

    @property
    def num_targeted(self) -> int:
        return int(round(self.targeted_fraction * self.num_campaigns))

    @property
    def num_static(self) -> int:
        return self.num_campaigns - self.num_targeted

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def sketch_params(self) -> SketchParams:
        return SketchParams(self.epsilon, self.delta, self.capacity, seed=derive_seed("sketch", self.key_seed))


PRESETS = {
    "default": {},
    "stress": dict(niche_user_fraction=0.2, niche_sites=25, niche_campaigns=5, niche_visit_prob=0.6),
}


# ---------------------------------------------------------------------------
# Config files: "key = value" per line, '#' comments
# ---------------------------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}
_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def _convert(name: str, text: str):
    kind = _FIELDS[name].type
    if kind == "bool":
        low = text.lower()
        if low in _TRUE | _FALSE:
            return low in _TRUE
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind == "int":
        return int(text.replace("_", ""))
    if kind == "float":
        return float(text)
    if kind == "ThresholdMode":
        return ThresholdMode(text)
    return text


def parse_config(text: str, base: SimConfig | None = None) -> SimConfig:
    """Parse a config file; ``preset = stress`` applies a named preset at that point."""
    values = dataclasses.asdict(base or SimConfig())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        if "=" not in line:
            raise ConfigParseError("expected 'key = value'", lineno, len(line.rstrip()) + 1)
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        key_col = len(key_part) - len(key_part.lstrip()) + 1
        value = value_part.strip()
        value_col = len(key_part) + 2 + len(value_part) - len(value_part.lstrip())
        if key == "preset":
            if value not in PRESETS:
                raise ConfigParseError(f"unknown preset {value!r}", lineno, value_col)
            values.update(PRESETS[value])
            continue
        if key not in _FIELDS:
            raise ConfigParseError(f"unknown key {key!r}", lineno, key_col)
        if not value:
            raise ConfigParseError(f"missing value for {key}", lineno, value_col)
        try:
            values[key] = _convert(key, value)
        except ValueError as exc:
            raise ConfigParseError(f"bad value for {key}: {exc}", lineno, value_col) from None
    return SimConfig(**values)


def format_config(config: SimConfig) -> str:
    lines = []
    for name in _FIELDS:
        value = getattr(config, name)
        if isinstance(value, bool):
            value = "on" if value else "off"
        elif isinstance(value, ThresholdMode):
            value = value.value
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# World and week generation
# ---------------------------------------------------------------------------


def ad_key(campaign: int) -> str:
    return f"https://ads.sim.example/c/{campaign}"


def site_domain(site: int) -> str:
    return f"site{site}.example"


@dataclass(frozen=True)
class Campaign:
    id: int
    targeted: bool
    sites: tuple[int, ...] = ()
    audience: tuple[int, ...] = ()
    frequency_cap: int = 0


@dataclass
class SimWorld:
    config: SimConfig
    site_popularity: np.ndarray
    site_slots: np.ndarray
    inventory_ptr: np.ndarray
    inventory: np.ndarray
    user_cluster: np.ndarray
    audiences: list[np.ndarray]
    niche_users: np.ndarray
    niche_sites: np.ndarray

    @property
    def num_static(self) -> int:
        return self.config.num_static

    def site_inventory(self, site: int) -> np.ndarray:
        return self.inventory[self.inventory_ptr[site]:self.inventory_ptr[site + 1]]

    def campaigns(self) -> list[Campaign]:
        sites: list[list[int]] = [[] for _ in range(self.num_static)]
        for s in range(self.config.num_websites):
            for c in self.site_inventory(s):
                sites[c].append(s)
        out = [Campaign(c, False, sites=tuple(sorted(set(sites[c])))) for c in range(self.num_static)]
        for t, audience in enumerate(self.audiences):
            out.append(Campaign(self.num_static + t, True, audience=tuple(audience.tolist()),
                                frequency_cap=self.config.frequency_cap))
        return out


def _world_rng(config: SimConfig) -> np.random.Generator:
    return np.random.default_rng([config.seed, 0])


def generate_world(config: SimConfig) -> SimWorld:
    rng = _world_rng(config)
    W, U = config.num_websites, config.num_users
    ns, nt = config.num_static, config.num_targeted
    popularity = 1.0 / np.arange(1, W + 1) ** config.zipf_exponent
    popularity /= popularity.sum()
    slot_draw = np.maximum(1, rng.poisson(config.avg_ads_per_site, W))
    cluster = rng.integers(0, config.interest_clusters, U)

    reach_cap = min(config.max_static_reach, W)
    reach = np.exp(rng.uniform(0, math.log(reach_cap), ns)).round().astype(np.int64).clip(1, W)
    inv: list[list[int]] = [[] for _ in range(W)]
    if config.ads_per_site_meaning == "slots":
        for c in range(ns):
            for s in rng.choice(W, reach[c], replace=False):
                inv[s].append(c)
    else:
        weights = reach / reach.sum()
        for s in range(W):
            k = min(int(slot_draw[s]), ns)
            inv[s] = sorted(rng.choice(ns, k, replace=False, p=weights).tolist())
    niche_sites = np.sort(rng.choice(W, config.niche_sites, replace=False)) if config.niche_sites else np.zeros(0, np.int64)
    for j in range(config.niche_campaigns):
        c = ns - 1 - j
        for s in niche_sites:
            if c not in inv[s]:
                inv[s].append(c)
    for s in range(W):
        if not inv[s]:
            inv[s].append(int(rng.integers(ns)))
    lengths = np.array([len(x) for x in inv], dtype=np.int64)
    ptr = np.concatenate([[0], np.cumsum(lengths)])
    flat = np.concatenate([np.asarray(x, dtype=np.int64) for x in inv])
    slots = slot_draw if config.ads_per_site_meaning == "slots" else lengths

    audiences = []
    for _ in range(nt):
        members = np.flatnonzero(cluster == rng.integers(config.interest_clusters))
        if members.size == 0:
            audiences.append(np.zeros(0, np.int64))
            continue
        share = rng.uniform(config.audience_min, config.audience_max)
        size = max(1, int(round(share * members.size)))
        audiences.append(np.sort(rng.choice(members, size, replace=False)))

    niche_users = np.zeros(U, dtype=bool)
    if config.niche_user_fraction and niche_sites.size:
        niche_users[rng.choice(U, int(round(config.niche_user_fraction * U)), replace=False)] = True
    return SimWorld(config, popularity, slots, ptr, flat, cluster, audiences, niche_users, niche_sites)


@dataclass
class SimWeek:
    """One week of browsing: visit-level and impression-level arrays."""

    world: SimWorld
    week: int
    visit_user: np.ndarray
    visit_site: np.ndarray
    visit_time: np.ndarray
    imp_visit: np.ndarray
    imp_campaign: np.ndarray
    # deduplicated (user, campaign) pairs and their distinct-domain counts
    pair_user: np.ndarray = field(init=False)
    pair_campaign: np.ndarray = field(init=False)
    pair_domains: np.ndarray = field(init=False)
    distinct_sites: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        cfg = self.world.config
        C, W = cfg.num_campaigns, cfg.num_websites
        user = self.visit_user[self.imp_visit]
        site = self.visit_site[self.imp_visit]
        triples = np.unique((user * C + self.imp_campaign) * W + site)
        pairs, counts = np.unique(triples // W, return_counts=True)
        self.pair_user = pairs // C
        self.pair_campaign = pairs % C
        self.pair_domains = counts
        visited = np.unique(self.visit_user * W + self.visit_site)
        self.distinct_sites = np.bincount(visited // W, minlength=cfg.num_users)

    @property
    def visits_per_user(self) -> np.ndarray:
        return np.bincount(self.visit_user, minlength=self.world.config.num_users)

    @property
    def truly_targeted(self) -> np.ndarray:
        return self.pair_campaign >= self.world.num_static

    def targeted_impressions(self) -> dict[tuple[int, int], int]:
        mask = self.imp_campaign >= self.world.num_static
        users = self.visit_user[self.imp_visit[mask]]
        keys, counts = np.unique(users * self.world.config.num_campaigns + self.imp_campaign[mask], return_counts=True)
        C = self.world.config.num_campaigns
        return {(int(k // C), int(k % C)): int(n) for k, n in zip(keys, counts)}

    def user_ad_sets(self) -> list[np.ndarray]:
        starts = np.searchsorted(self.pair_user, np.arange(self.world.config.num_users + 1))
        return [self.pair_campaign[starts[u]:starts[u + 1]] for u in range(self.world.config.num_users)]

    def observation_logs(self, window_start: float = 0.0) -> dict[int, list[AdObservation]]:
        """Client-format logs (1-based user index), one record per (ad, domain) at first sight."""
        cfg = self.world.config
        C, W = cfg.num_campaigns, cfg.num_websites
        user = self.visit_user[self.imp_visit]
        site = self.visit_site[self.imp_visit]
        times = self.visit_time[self.imp_visit]
        key = (user * C + self.imp_campaign) * W + site
        order = np.lexsort((times, key))
        first = np.unique(key[order], return_index=True)[1]
        logs: dict[int, list[AdObservation]] = {u: [] for u in range(1, cfg.num_users + 1)}
        for k in order[first]:
            logs[int(user[k]) + 1].append(AdObservation(
                ad=ad_key(int(self.imp_campaign[k])), domain=site_domain(int(site[k])),
                timestamp=window_start + float(times[k])))
        for log in logs.values():
            log.sort(key=lambda o: (o.timestamp, o.domain, o.ad))
        return logs


def simulate_week(world: SimWorld, week: int = 0) -> SimWeek:
    cfg = world.config
    rng = np.random.default_rng([cfg.seed, 1, week])
    U, ns = cfg.num_users, world.num_static
    visits = rng.poisson(cfg.avg_user_visits, U)
    visit_user = np.repeat(np.arange(U, dtype=np.int64), visits)
    visit_site = rng.choice(cfg.num_websites, visit_user.size, p=world.site_popularity).astype(np.int64)
    if world.niche_users.any():
        to_niche = world.niche_users[visit_user] & (rng.random(visit_user.size) < cfg.niche_visit_prob)
        visit_site[to_niche] = rng.choice(world.niche_sites, int(to_niche.sum()))
    visit_time = rng.uniform(0, WINDOW_SECONDS, visit_user.size)

    slots = world.site_slots[visit_site]
    imp_visit = np.repeat(np.arange(visit_user.size, dtype=np.int64), slots)
    imp_site = visit_site[imp_visit]
    inv_len = np.diff(world.inventory_ptr)[imp_site]
    if cfg.ads_per_site_meaning == "slots":
        offset = (rng.random(imp_visit.size) * inv_len).astype(np.int64)
    else:
        slot_start = np.concatenate([[0], np.cumsum(slots)])[:-1]
        offset = np.arange(imp_visit.size) - slot_start[imp_visit]
    imp_campaign = world.inventory[world.inventory_ptr[imp_site] + offset]

    # targeted ads: a fixed random order of each member's visits, truncated to
    # the cap, so a higher cap only adds impressions
    visit_start = np.concatenate([[0], np.cumsum(visits)])
    slot_start = np.concatenate([[0], np.cumsum(slots)])
    chosen_visits, chosen_campaigns = [], []
    for t, audience in enumerate(world.audiences):
        for u in audience:
            order = rng.permutation(visits[u])
            take = order[:min(cfg.frequency_cap, visits[u])]
            chosen_visits.append(visit_start[u] + take)
            chosen_campaigns.append(np.full(take.size, ns + t, dtype=np.int64))
    if chosen_visits:
        tv = np.concatenate(chosen_visits)
        tc = np.concatenate(chosen_campaigns)
        position = slot_start[tv] + (rng.random(tv.size) * slots[tv]).astype(np.int64)
        imp_campaign[position] = tc
    return SimWeek(world, week, visit_user, visit_site, visit_time, imp_visit, imp_campaign)


# ---------------------------------------------------------------------------
# Classification and the privacy pipeline
# ---------------------------------------------------------------------------


def _local_conditions(week: SimWeek, mode: ThresholdMode) -> tuple[np.ndarray, np.ndarray]:
    """(domains condition per pair, sufficient-data flag per pair)."""
    U = week.world.config.num_users
    pu, dc = week.pair_user, week.pair_domains.astype(np.int64)
    n = np.bincount(pu, minlength=U).astype(np.int64)
    total = np.bincount(pu, weights=dc, minlength=U).round().astype(np.int64)
    if ThresholdMode(mode) is ThresholdMode.MEAN:
        domains_ok = dc * n[pu] > total[pu]
    else:
        order = np.lexsort((dc, pu))
        sorted_dc = dc[order]
        start = np.concatenate([[0], np.cumsum(n)])[:-1]
        has = n > 0
        med2 = np.zeros(U, dtype=np.int64)
        med2[has] = sorted_dc[(start + (n - 1) // 2)[has]] + sorted_dc[(start + n // 2)[has]]
        domains_ok = 2 * n[pu] * dc > 2 * total[pu] + n[pu] * med2[pu]
    sufficient = (week.distinct_sites >= MIN_AD_DOMAINS)[pu]
    return domains_ok, sufficient


def _users_condition(counts: np.ndarray, users_th: Fraction) -> np.ndarray:
    return counts.astype(np.int64) * users_th.denominator < users_th.numerator


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    insufficient: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(*(a + b for a, b in zip(dataclasses.astuple(self), dataclasses.astuple(other))))

    @property
    def fn_rate(self) -> float:
        return self.fn / (self.fn + self.tp) if self.fn + self.tp else math.nan

    @property
    def fp_rate(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else math.nan

    @property
    def insufficient_fraction(self) -> float:
        total = self.tp + self.fp + self.tn + self.fn + self.insufficient
        return self.insufficient / total if total else math.nan


def confusion(week: SimWeek, users_counts: np.ndarray, users_th: Fraction, mode: ThresholdMode) -> ConfusionCounts:
    domains_ok, sufficient = _local_conditions(week, mode)
    predicted = domains_ok & _users_condition(users_counts[week.pair_campaign], users_th)
    truth = week.truly_targeted
    s = sufficient
    return ConfusionCounts(
        tp=int((predicted & truth & s).sum()), fp=int((predicted & ~truth & s).sum()),
        tn=int((~predicted & ~truth & s).sum()), fn=int((~predicted & truth & s).sum()),
        insufficient=int((~s).sum()),
    )


def cleartext_counts(week: SimWeek) -> np.ndarray:
    return np.bincount(week.pair_campaign, minlength=week.world.config.num_campaigns)


@lru_cache(maxsize=4)
def _campaign_ids(key_seed: int, seed: int, oprf_bits: int, a_size: int, num_campaigns: int) -> np.ndarray:
    """Ad id of every campaign's ad key, obtained through the blind OPRF exchange.

    The OPRF key follows the simulation seed because id collisions change the
    results. The mapping is deterministic, so one exchange per distinct key
    stands in for every user's identical exchange.
    """
    key = oprf_keygen(oprf_bits, seed=derive_seed("sim-oprf", key_seed, seed, oprf_bits))
    client = OprfClient(key.public, InProcessTransport(OprfServer(key)), a_size,
                        rng=random.Random(derive_seed("sim-oprf-client", key_seed, seed)))
    return np.array([client.map_url(ad_key(c)) for c in range(num_campaigns)], dtype=np.uint64)


@dataclass
class PrivateCounts:
    aggregate: CountMinSketch
    estimates: np.ndarray  # per campaign
    users_th: Fraction
    distribution_size: int


def private_counts(week: SimWeek, mode: ThresholdMode) -> PrivateCounts:
    """Run the week through OPRF mapping, local sketches, blinding and aggregation."""
    cfg = week.world.config
    params = cfg.sketch_params()
    ids = _campaign_ids(cfg.key_seed, cfg.seed, cfg.oprf_bits, cfg.a_size, cfg.num_campaigns)
    infra = infrastructure(cfg.key_seed, cfg.num_users, "p256", cfg.oprf_bits)
    roster = Roster.from_keypairs(infra.keypairs, derive_seed("round", cfg.seed, week.week))
    vectors = blinding_vectors_batch(infra.keypairs, roster, params.cell_count)
    state = RoundState(roster, params)
    for u, campaigns in enumerate(week.user_ad_sets()):
        sketch = CountMinSketch(params)
        if campaigns.size:
            sketch.update_many(np.unique(ids[campaigns]))
        state.collect(blind_cells(sketch, vectors.pop(u + 1), u + 1))
    aggregate = state.finalize()
    dist = users_distribution(aggregate, cfg.a_size)
    return PrivateCounts(aggregate, aggregate.query_many(ids).astype(np.int64),
                         users_threshold(dist, mode), len(dist))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentResult:
    config: SimConfig
    counts: ConfusionCounts
    users_th_clear: float
    users_th_cms: float | None
    exact_fraction: float | None  # share of seen ads whose private estimate is exact

    @property
    def fn_rate(self) -> float:
        return self.counts.fn_rate

    @property
    def fp_rate(self) -> float:
        return self.counts.fp_rate

    @property
    def insufficient_fraction(self) -> float:
        return self.counts.insufficient_fraction


def _evaluate_week(week: SimWeek, mode: ThresholdMode, privacy: bool):
    clear = cleartext_counts(week)
    th_clear = threshold_of_counts(clear[clear > 0], mode)
    if not privacy:
        return confusion(week, clear, th_clear, mode), th_clear, None, None
    private = private_counts(week, mode)
    seen = clear > 0
    exact = float(np.mean(private.estimates[seen] == clear[seen]))
    return confusion(week, private.estimates, private.users_th, mode), th_clear, private.users_th, exact


def run_experiment(config: SimConfig) -> ExperimentResult:
    world = generate_world(config)
    total = ConfusionCounts()
    clear_ths, cms_ths, exacts = [], [], []
    for w in range(config.weeks):
        counts, th_clear, th_cms, exact = _evaluate_week(simulate_week(world, w), config.mode, config.privacy)
        total = total + counts
        clear_ths.append(th_clear)
        if th_cms is not None:
            cms_ths.append(th_cms)
            exacts.append(exact)
    mean = lambda xs: float(sum(xs, Fraction(0)) / len(xs))
    return ExperimentResult(
        config, total, mean(clear_ths),
        mean(cms_ths) if cms_ths else None,
        float(np.mean(exacts)) if exacts else None,
    )


@dataclass(frozen=True)
class PipelineComparison:
    users_th_clear: Fraction
    users_th_cms: Fraction
    exact_fraction: float
    overestimates: dict[int, tuple[int, int]]  # campaign -> (true, estimate) where they differ
    decision_flips: int


def compare_threshold_pipelines(config: SimConfig, week: int = 0) -> PipelineComparison:
    """Run one week through exact counting and through the private pipeline."""
    sim = simulate_week(generate_world(config), week)
    mode = config.mode
    clear = cleartext_counts(sim)
    th_clear = threshold_of_counts(clear[clear > 0], mode)
    private = private_counts(sim, mode)
    seen = np.flatnonzero(clear)
    diff = {int(c): (int(clear[c]), int(private.estimates[c])) for c in seen if clear[c] != private.estimates[c]}
    domains_ok, _ = _local_conditions(sim, mode)
    a = domains_ok & _users_condition(clear[sim.pair_campaign], th_clear)
    b = domains_ok & _users_condition(private.estimates[sim.pair_campaign], private.users_th)
    return PipelineComparison(th_clear, private.users_th, 1 - len(diff) / len(seen), diff, int((a != b).sum()))


# ---------------------------------------------------------------------------
# Sweeps and CSV output
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    parameter: str
    value: str
    seed: int
    fn_rate: float
    fp_rate: float
    insufficient_fraction: float
    users_th_clear: float
    users_th_cms: float | None

    def cells(self) -> list[str]:
        num = lambda x: "" if x is None else f"{x:.6f}"
        return [self.parameter, self.value, str(self.seed), num(self.fn_rate), num(self.fp_rate),
                num(self.insufficient_fraction), num(self.users_th_clear), num(self.users_th_cms)]


def _value_text(value) -> str:
    return value.value if isinstance(value, ThresholdMode) else str(value)


def _sweep_job(job: tuple[SimConfig, str, object]) -> SweepRow:
    config, parameter, value = job
    result = run_experiment(config)
    return SweepRow(parameter, _value_text(value), config.seed, result.fn_rate, result.fp_rate,
                    result.insufficient_fraction, result.users_th_clear, result.users_th_cms)


def sweep(config: SimConfig, parameter: str, values: Sequence, seeds: Iterable[int],
          workers: int = 1) -> list[SweepRow]:
    """One row per (value, seed), in that order regardless of ``workers``."""
    if parameter not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {parameter!r}; choose from {', '.join(SWEEPABLE)}")
    jobs = []
    for value in values:
        converted = _convert(parameter, str(_value_text(value)))
        for seed in seeds:
            jobs.append((config.replace(**{parameter: converted, "seed": seed}), parameter, converted))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_sweep_job, jobs))
    return [_sweep_job(job) for job in jobs]


def rows_to_csv(rows: Iterable[SweepRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.cells())
    return out.getvalue()


def result_row(result: ExperimentResult, parameter: str = "none", value: str = "") -> SweepRow:
    return SweepRow(parameter, value, result.config.seed, result.fn_rate, result.fp_rate,
                    result.insufficient_fraction, result.users_th_clear, result.users_th_cms)
