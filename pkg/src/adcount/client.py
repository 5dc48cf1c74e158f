"""Per-user weekly state and the count-based targeting classifier.

An ad is labelled targeted for a user when both hold:

* the user saw it on more distinct domains than the user's own threshold
  (mean, or mean + median, of the per-ad domain counts this week), and
* fewer users saw it overall than the global users threshold.

The local threshold is only defined once the user has seen ads on at least
four distinct domains in the window. Comparisons are strict, so an ad sitting
exactly on a threshold is not targeted.

Windows are tumbling weeks aligned with the aggregation round. Each distinct
ad seen in the window is mapped to its id once and inserted into the local
sketch once: the sketch counts users, not impressions.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Mapping, TextIO
from urllib.parse import urlsplit, urlunsplit

from .blinding import BlindedReport, BlindingVector, Roster, UserKeyPair, adjust_blinding, blind_cells, blinding_vector
from .errors import ReplayParseError, StaleObservationError
from .sketch import CountMinSketch, SketchParams

WINDOW_SECONDS = 7 * 24 * 3600
MIN_AD_DOMAINS = 4

_MULTIPART_SUFFIXES = frozenset({
    "co.uk", "org.uk", "ac.uk", "gov.uk", "com.au", "net.au", "org.au", "co.jp",
    "co.nz", "com.br", "com.cn", "com.mx", "co.in", "co.za", "com.tr", "com.es",
})


class ThresholdMode(str, Enum):
    MEAN = "mean"
    MEAN_PLUS_MEDIAN = "mean-median"


class Decision(str, Enum):
    TARGETED = "targeted"
    NON_TARGETED = "non-targeted"
    INSUFFICIENT_DATA = "insufficient-data"


def registrable_domain(host: str) -> str:
    """Approximate registrable domain: last two labels, three for known multi-part suffixes."""
    host = host.strip().lower().rstrip(".")
    if "://" in host:
        host = urlsplit(host).hostname or ""
    host = host.split("/")[0].rsplit("@", 1)[-1]
    if host.count(":") == 1:
        host = host.split(":")[0]
    if not host:
        raise ValueError("empty domain")
    labels = host.split(".")
    if all(label.isdigit() for label in labels) or len(labels) <= 2:
        return host
    if ".".join(labels[-2:]) in _MULTIPART_SUFFIXES:
        return ".".join(labels[-3:])
    return ".".join(labels[-2:])


def canonical_ad_key(raw: str) -> str:
    """Lowercase scheme and host, drop the fragment; other keys are just stripped."""
    raw = raw.strip()
    if not raw:
        raise ValueError("empty ad key")
    if "://" not in raw:
        return raw
    parts = urlsplit(raw)
    return urlunsplit((parts.scheme.lower(), parts.netloc.lower(), parts.path, parts.query, ""))


@dataclass(frozen=True)
class AdObservation:
    ad: str
    domain: str
    timestamp: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "ad", canonical_ad_key(self.ad))
        object.__setattr__(self, "domain", registrable_domain(self.domain))


def threshold(values: Iterable[int], mode: ThresholdMode) -> Fraction:
    """Mean (or mean + median) as an exact rational."""
    values = [Fraction(v) for v in values]
    if not values:
        raise ValueError("threshold of an empty distribution")
    result = sum(values, Fraction(0)) / len(values)
    if ThresholdMode(mode) is ThresholdMode.MEAN_PLUS_MEDIAN:
        result += statistics.median(values)
    return result


def decide(domains_count: int, domains_th: Fraction | None, users_count: int,
           users_th: Fraction) -> Decision:
    if domains_th is None:
        return Decision.INSUFFICIENT_DATA
    if domains_count > domains_th and users_count < users_th:
        return Decision.TARGETED
    return Decision.NON_TARGETED


class ClientWeekState:
    """One user's observations for the current week.

    ``mapper`` turns an ad key into its id (``OprfClient.map_url`` in
    deployment). Without a mapper or sketch params the state only does local
    counting.
    """

    def __init__(self, window_start: float, params: SketchParams | None = None,
                 mapper: Callable[[str], int] | None = None):
        self.params = params
        self.mapper = mapper
        self._reset(window_start)

    def _reset(self, window_start: float) -> None:
        self.window_start = window_start
        self.ad_domains: dict[str, set[str]] = {}
        self.ad_serving_domains: set[str] = set()
        self.ad_ids: dict[str, int] = {}
        self.sketch = CountMinSketch(self.params) if self.params is not None else None
        self.insertions = 0
        self._reported: CountMinSketch | None = None

    @property
    def window_end(self) -> float:
        return self.window_start + WINDOW_SECONDS

    def advance_window(self, window_start: float) -> None:
        """Start a fresh week; all counts and the local sketch are dropped."""
        self._reset(window_start)

    def record_observation(self, obs: AdObservation) -> None:
        if obs.timestamp < self.window_start:
            raise StaleObservationError(
                f"observation at {obs.timestamp} precedes window start {self.window_start}"
            )
        if obs.timestamp >= self.window_end:
            raise ValueError("observation after the window end; advance the window first")
        domains = self.ad_domains.get(obs.ad)
        if domains is None:
            domains = self.ad_domains[obs.ad] = set()
            if self.mapper is not None:
                ad_id = self.mapper(obs.ad)
                self.ad_ids[obs.ad] = ad_id
                if self.sketch is not None:
                    self.sketch.update(ad_id)
                    self.insertions += 1
        domains.add(obs.domain)
        self.ad_serving_domains.add(obs.domain)

    def record_all(self, observations: Iterable[AdObservation]) -> None:
        for obs in sorted(observations, key=lambda o: o.timestamp):
            self.record_observation(obs)

    @property
    def distinct_ads(self) -> list[str]:
        return list(self.ad_domains)

    def domains_count(self, ad: str) -> int:
        return len(self.ad_domains.get(canonical_ad_key(ad), ()))

    def domains_threshold(self, mode: ThresholdMode = ThresholdMode.MEAN) -> Fraction | None:
        """Local threshold, or ``None`` when fewer than four ad-serving domains were seen."""
        if len(self.ad_serving_domains) < MIN_AD_DOMAINS:
            return None
        return threshold((len(d) for d in self.ad_domains.values()), mode)

    def classify(self, ad: str, users_count: int, users_th: Fraction,
                 mode: ThresholdMode = ThresholdMode.MEAN) -> Decision:
        return decide(self.domains_count(ad), self.domains_threshold(mode), users_count, users_th)

    def classify_all(self, users_counts: Mapping[str, int], users_th: Fraction,
                     mode: ThresholdMode = ThresholdMode.MEAN) -> dict[str, Decision]:
        """Decide every distinct ad of the window; ``users_counts`` is keyed by ad key."""
        local_th = self.domains_threshold(mode)
        return {
            ad: decide(len(domains), local_th, users_counts.get(ad, 0), users_th)
            for ad, domains in self.ad_domains.items()
        }

    # -- reporting -------------------------------------------------------------

    def build_report(self, keypair: UserKeyPair, roster: Roster,
                     vector: BlindingVector | None = None) -> BlindedReport:
        """Blind this window's sketch for the round in ``roster``.

        The plain sketch is kept until the window advances in case the round
        needs an adjusted re-report.
        """
        if self.sketch is None:
            raise ValueError("state has no sketch parameters")
        if vector is None:
            vector = blinding_vector(keypair, roster, self.params.cell_count)
        self._reported = self.sketch.copy()
        return blind_cells(self._reported, vector, keypair.index)

    def build_adjusted_report(self, keypair: UserKeyPair, roster: Roster, missing: Iterable[int],
                              retry: int = 1, vector: BlindingVector | None = None) -> BlindedReport:
        if self._reported is None:
            raise ValueError("no report was built this window")
        if vector is None:
            vector = adjust_blinding(keypair, roster, missing, self.params.cell_count, retry)
        return blind_cells(self._reported, vector, keypair.index)


# ---------------------------------------------------------------------------
# Observation replay files
# ---------------------------------------------------------------------------
#
# One observation per line, tab separated:  <timestamp>\t<domain>\t<ad key>
# Blank lines and lines starting with '#' are ignored.


def parse_replay(lines: Iterable[str]) -> Iterator[AdObservation]:
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split(None, 2)
        if len(parts) != 3:
            raise ReplayParseError("expected 3 fields: timestamp, domain, ad key", lineno)
        ts, domain, ad = parts
        try:
            yield AdObservation(ad=ad, domain=domain, timestamp=float(ts))
        except ValueError as exc:
            raise ReplayParseError(str(exc), lineno) from None


def read_replay(stream: TextIO) -> list[AdObservation]:
    return list(parse_replay(stream))


def format_replay(observations: Iterable[AdObservation]) -> str:
    return "".join(f"{o.timestamp:g}\t{o.domain}\t{o.ad}\n" for o in observations)
