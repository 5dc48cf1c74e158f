"""Deterministic in-process orchestration of one weekly round.

Actors (``client:<i>``, ``aggregator``, ``oprf``) talk only through binary
frames. Asynchronous messages wait in a pending pool and a seeded scheduler
picks which one to deliver next; OPRF exchanges are synchronous calls that
are logged like any other message. Every delivery is appended to the
transcript, and replaying a transcript forces the recorded delivery order.

Silent clients are the only injected fault: members of ``drop`` observe and
classify as usual but never send a report.
"""

from __future__ import annotations

import hashlib
import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

from .aggregator import (
    Phase,
    RoundState,
    UsersDistribution,
    users_count,
    users_distribution,
    users_threshold,
)
from .blinding import Roster, UserKeyPair, blinding_vectors_batch, keygen
from .client import AdObservation, ClientWeekState, Decision, ThresholdMode
from .errors import ConfigError, EmptyDistributionError, AdCountError
from .groups import group_by_name
from .messages import (
    Frame,
    MessageType,
    decode_id_list,
    decode_missing_list,
    decode_report,
    decode_threshold,
    missing_list_frame,
    oprf_frame,
    report_frame,
    threshold_frame,
    users_count_request_frame,
    users_count_response_frame,
)
from .oprf import DEFAULT_A_SIZE, OprfClient, OprfServer, OprfServerKey, oprf_keygen
from .sketch import CountMinSketch, SketchParams

AGGREGATOR = "aggregator"
OPRF = "oprf"
BROADCAST = "broadcast"

# what each server-side actor may ever receive
ALLOWED_INBOX = {
    AGGREGATOR: {MessageType.REPORT, MessageType.ADJUSTED_REPORT, MessageType.USERS_COUNT_REQUEST},
    OPRF: {MessageType.OPRF_REQUEST},
}


class ReplayMismatchError(AdCountError):
    """A replayed run tried to deliver something the transcript does not list next."""


def client_name(index: int) -> str:
    return f"client:{index}"


def derive_seed(label: str, *parts: int) -> int:
    material = "/".join([label, *map(str, parts)]).encode()
    return int.from_bytes(hashlib.sha256(material).digest()[:8], "big")


@dataclass(frozen=True)
class HarnessConfig:
    """``seed`` drives delivery order and client randomness; ``key_seed`` the long-lived keys."""

    num_users: int
    epsilon: float = 0.001
    delta: float = 0.001
    capacity: int = 100_000
    a_size: int = DEFAULT_A_SIZE
    seed: int = 0
    key_seed: int = 0
    drop: frozenset = frozenset()
    mode: ThresholdMode = ThresholdMode.MEAN
    oprf_bits: int = 2048
    group: str = "p256"
    round_tag: int = 1
    window_start: float = 0.0
    batched_blinding: bool = False
    keep_payloads: bool = False

    def validate(self) -> None:
        if self.num_users < 1:
            raise ConfigError("num_users must be >= 1")
        bad = sorted(i for i in self.drop if not 1 <= i <= self.num_users)
        if bad:
            raise ConfigError(f"drop indices {bad} outside [1, {self.num_users}]")
        if self.a_size < 1:
            raise ConfigError("a_size must be >= 1")
        try:
            ThresholdMode(self.mode)
            group_by_name(self.group)
            self.sketch_params()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None

    def sketch_params(self) -> SketchParams:
        return SketchParams(self.epsilon, self.delta, self.capacity, seed=derive_seed("sketch", self.key_seed))


@dataclass(frozen=True)
class Infrastructure:
    keypairs: tuple[UserKeyPair, ...]
    oprf_key: OprfServerKey


@lru_cache(maxsize=8)
def infrastructure(key_seed: int, num_users: int, group: str, oprf_bits: int) -> Infrastructure:
    """Long-lived keys; cached so repeated rounds reuse pair secrets."""
    g = group_by_name(group)
    keypairs = tuple(keygen(g, seed=derive_seed("user", key_seed, i), index=i) for i in range(1, num_users + 1))
    return Infrastructure(keypairs, oprf_keygen(oprf_bits, seed=derive_seed("oprf", key_seed, oprf_bits)))


@dataclass(frozen=True)
class TranscriptEntry:
    round: int
    step: int
    sender: str
    receiver: str
    type: str
    bytes: int
    digest: str
    payload: bytes | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> str:
        record = asdict(self)
        record["payload"] = None if self.payload is None else self.payload.hex()
        return json.dumps(record, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TranscriptEntry":
        record = json.loads(line)
        payload = record.pop("payload", None)
        return cls(**record, payload=None if payload is None else bytes.fromhex(payload))


def dump_transcript(entries: Iterable[TranscriptEntry]) -> str:
    return "".join(e.to_json() + "\n" for e in entries)


def load_transcript(text: str) -> list[TranscriptEntry]:
    return [TranscriptEntry.from_json(line) for line in text.splitlines() if line.strip()]


class Scheduler:
    """Seeded delivery of pending frames, or forced order when replaying."""

    def __init__(self, round_tag: int, rng: random.Random, keep_payloads: bool = False,
                 forced: Sequence[TranscriptEntry] | None = None):
        self.round_tag = round_tag
        self.rng = rng
        self.keep_payloads = keep_payloads
        self.forced = list(forced) if forced is not None else None
        self.pending: list[tuple[str, str, Frame, bytes]] = []
        self.recipients: dict[int, tuple[str, ...]] = {}
        self.transcript: list[TranscriptEntry] = []
        self.actors: dict = {}

    def _log(self, sender: str, receiver: str, frame: Frame, data: bytes) -> None:
        entry = TranscriptEntry(
            self.round_tag, len(self.transcript), sender, receiver, frame.type.name,
            len(data), hashlib.sha256(data).hexdigest()[:32], data if self.keep_payloads else None,
        )
        if self.forced is not None:
            step = len(self.transcript)
            if step >= len(self.forced) or self.forced[step] != entry:
                raise ReplayMismatchError(f"delivery {step} differs from the transcript")
        self.transcript.append(entry)

    def post(self, sender: str, receiver: str, frame: Frame) -> None:
        self.pending.append((sender, receiver, frame, frame.to_bytes()))

    def broadcast(self, sender: str, receivers: Sequence[str], frame: Frame) -> None:
        """One frame for several receivers, logged as a single delivery."""
        item = (sender, BROADCAST, frame, frame.to_bytes())
        self.recipients[id(item)] = tuple(receivers)
        self.pending.append(item)

    def _pick(self) -> int:
        if self.forced is None:
            return self.rng.randrange(len(self.pending))
        step = len(self.transcript)
        if step >= len(self.forced):
            raise ReplayMismatchError("transcript ended early")
        want = self.forced[step]
        for k, (sender, receiver, frame, data) in enumerate(self.pending):
            if (sender, receiver, frame.type.name) == (want.sender, want.receiver, want.type):
                return k
        raise ReplayMismatchError(f"delivery {step} not pending: {want.sender} -> {want.receiver}")

    def run(self) -> None:
        while self.pending:
            item = self.pending.pop(self._pick())
            sender, receiver, frame, data = item
            self._log(sender, receiver, frame, data)
            targets = self.recipients.pop(id(item), None) or (receiver,)
            for target in targets:
                self.actors[target].receive(sender, Frame.from_bytes(data))

    def call(self, sender: str, receiver: str, frame: Frame) -> Frame:
        """Synchronous request/response, logged as two deliveries."""
        data = frame.to_bytes()
        self._log(sender, receiver, frame, data)
        response = self.actors[receiver].receive(sender, Frame.from_bytes(data))
        back = response.to_bytes()
        self._log(receiver, sender, response, back)
        return Frame.from_bytes(back)


class _ScheduledTransport:
    def __init__(self, scheduler: Scheduler, sender: str):
        self.scheduler = scheduler
        self.sender = sender

    def exchange(self, request: bytes) -> bytes:
        frame = oprf_frame(MessageType.OPRF_REQUEST, self.scheduler.round_tag, request)
        return self.scheduler.call(self.sender, OPRF, frame).body


class OprfActor:
    def __init__(self, key: OprfServerKey):
        self.server = OprfServer(key)
        self.inbox: Counter = Counter()

    def receive(self, sender: str, frame: Frame) -> Frame:
        self.inbox[frame.type] += 1
        return oprf_frame(MessageType.OPRF_RESPONSE, frame.round_tag, self.server.handle(frame.body))


class AggregatorActor:
    def __init__(self, scheduler: Scheduler, roster: Roster, params: SketchParams):
        self.scheduler = scheduler
        self.round = RoundState(roster, params)
        self.inbox: Counter = Counter()

    def receive(self, sender: str, frame: Frame) -> None:
        self.inbox[frame.type] += 1
        if frame.type in (MessageType.REPORT, MessageType.ADJUSTED_REPORT):
            report = decode_report(frame)
            if sender != client_name(report.user_index):
                raise AdCountError(f"{sender} sent a report for user {report.user_index}")
            self.round.collect(report)
        elif frame.type is MessageType.USERS_COUNT_REQUEST:
            counts = users_count(self.round.aggregate, decode_id_list(frame))
            self.scheduler.post(AGGREGATOR, sender, users_count_response_frame(frame.round_tag, counts))
        else:
            raise AdCountError(f"aggregator cannot handle {frame.type.name}")


class ClientActor:
    def __init__(self, scheduler: Scheduler, keypair: UserKeyPair, roster: Roster,
                 state: ClientWeekState, silent: bool, mode: ThresholdMode):
        self.scheduler = scheduler
        self.keypair = keypair
        self.roster = roster
        self.state = state
        self.silent = silent
        self.mode = mode
        self.vectors: dict[int, object] = {}
        self.users_th: Fraction | None = None
        self.decisions: dict[str, Decision] = {}
        self._asked: list[str] = []

    @property
    def name(self) -> str:
        return client_name(self.keypair.index)

    def send_report(self) -> None:
        if self.silent:
            return
        report = self.state.build_report(self.keypair, self.roster, self.vectors.get(0))
        self.scheduler.post(self.name, AGGREGATOR, report_frame(report))

    def receive(self, sender: str, frame: Frame) -> None:
        if frame.type is MessageType.MISSING_LIST:
            retry, missing = decode_missing_list(frame)
            if not self.silent:
                report = self.state.build_adjusted_report(
                    self.keypair, self.roster, missing, retry, self.vectors.get(retry))
                self.scheduler.post(self.name, AGGREGATOR, report_frame(report))
        elif frame.type is MessageType.THRESHOLD_BROADCAST:
            self.users_th, _ = decode_threshold(frame)
            self._asked = sorted(self.state.ad_ids)
            if self._asked:
                ids = [self.state.ad_ids[ad] for ad in self._asked]
                self.scheduler.post(self.name, AGGREGATOR, users_count_request_frame(frame.round_tag, ids))
        elif frame.type is MessageType.USERS_COUNT_RESPONSE:
            counts = dict(zip(self._asked, decode_id_list(frame)))
            self.decisions = self.state.classify_all(counts, self.users_th, self.mode)
        else:
            raise AdCountError(f"client cannot handle {frame.type.name}")


@dataclass
class RoundOutcome:
    round_tag: int
    phase: Phase
    aggregate: CountMinSketch
    distribution: UsersDistribution
    users_th: Fraction | None
    missing: list[int]
    decisions: dict[int, dict[str, Decision]]
    message_counts: dict[str, int]
    byte_totals: dict[str, int]
    inboxes: dict[str, dict[str, int]]
    transcript: list[TranscriptEntry]


def _normalize_logs(config: HarnessConfig, logs) -> dict[int, list[AdObservation]]:
    if isinstance(logs, Mapping):
        out = {int(k): list(v) for k, v in logs.items()}
    else:
        out = {i: list(v) for i, v in enumerate(logs, 1)}
    extra = sorted(set(out) - set(range(1, config.num_users + 1)))
    if extra:
        raise ConfigError(f"logs for unknown users {extra}")
    return {i: out.get(i, []) for i in range(1, config.num_users + 1)}


def run_round(config: HarnessConfig, logs, transcript: Sequence[TranscriptEntry] | None = None) -> RoundOutcome:
    """Run setup, mapping, reports, optional adjustment, finalization and classification.

    Passing ``transcript`` replays a previous run: deliveries are forced into the
    recorded order and any divergence raises ``ReplayMismatchError``.
    """
    config.validate()
    logs = _normalize_logs(config, logs)
    mode = ThresholdMode(config.mode)
    params = config.sketch_params()
    infra = infrastructure(config.key_seed, config.num_users, config.group, config.oprf_bits)
    roster = Roster.from_keypairs(infra.keypairs, config.round_tag)
    rng = random.Random(derive_seed("schedule", config.seed, config.round_tag))
    scheduler = Scheduler(config.round_tag, rng, config.keep_payloads, transcript)

    oprf_actor = OprfActor(infra.oprf_key)
    aggregator = AggregatorActor(scheduler, roster, params)
    scheduler.actors.update({OPRF: oprf_actor, AGGREGATOR: aggregator})
    clients: dict[int, ClientActor] = {}
    for kp in infra.keypairs:
        name = client_name(kp.index)
        oprf_client = OprfClient(
            infra.oprf_key.public, _ScheduledTransport(scheduler, name), config.a_size,
            rng=random.Random(derive_seed("client", config.seed, config.round_tag, kp.index)),
        )
        state = ClientWeekState(config.window_start, params, oprf_client.map_url)
        clients[kp.index] = ClientActor(scheduler, kp, roster, state, kp.index in config.drop, mode)
        scheduler.actors[name] = clients[kp.index]

    for index, actor in clients.items():
        actor.state.record_all(logs[index])

    survivors = [kp for kp in infra.keypairs if kp.index not in config.drop]
    if config.batched_blinding and survivors:
        for index, vec in blinding_vectors_batch(infra.keypairs, roster, params.cell_count).items():
            clients[index].vectors[0] = vec
    for actor in clients.values():
        actor.send_report()
    scheduler.run()

    missing = aggregator.round.detect_missing()
    if missing:
        retry_missing = aggregator.round.begin_adjustment(missing)
        if config.batched_blinding:
            batch = blinding_vectors_batch(survivors, roster, params.cell_count, retry_missing, 1)
            for index, vec in batch.items():
                clients[index].vectors[1] = vec
        frame = missing_list_frame(config.round_tag, aggregator.round.retry, retry_missing)
        scheduler.broadcast(AGGREGATOR, [client_name(kp.index) for kp in survivors], frame)
        scheduler.run()

    aggregate = aggregator.round.finalize()
    distribution = users_distribution(aggregate, config.a_size)
    try:
        users_th = users_threshold(distribution, mode)
    except EmptyDistributionError:
        users_th = None
    if users_th is not None:
        frame = threshold_frame(config.round_tag, users_th, mode)
        scheduler.broadcast(AGGREGATOR, [client_name(i) for i in roster.indices], frame)
        scheduler.run()

    counts: Counter = Counter()
    sizes: Counter = Counter()
    for e in scheduler.transcript:
        counts[e.type] += 1
        sizes[e.type] += e.bytes
    return RoundOutcome(
        round_tag=config.round_tag,
        phase=aggregator.round.phase,
        aggregate=aggregate,
        distribution=distribution,
        users_th=users_th,
        missing=missing,
        decisions={i: a.decisions for i, a in clients.items() if a.decisions},
        message_counts=dict(sorted(counts.items())),
        byte_totals=dict(sorted(sizes.items())),
        inboxes={
            AGGREGATOR: {t.name: n for t, n in sorted(aggregator.inbox.items())},
            OPRF: {t.name: n for t, n in sorted(oprf_actor.inbox.items())},
        },
        transcript=scheduler.transcript,
    )


def replay(config: HarnessConfig, logs, transcript: Sequence[TranscriptEntry]) -> RoundOutcome:
    return run_round(config, logs, transcript)


def privacy_violations(outcome: RoundOutcome, ad_keys: Iterable[str] = ()) -> list[str]:
    """Inbox inventory check, plus a payload scan for ad key strings when payloads were kept."""
    problems = []
    for actor, allowed in ALLOWED_INBOX.items():
        for kind in outcome.inboxes.get(actor, {}):
            if MessageType[kind] not in allowed:
                problems.append(f"{actor} received {kind}")
    needles = [k.encode() for k in ad_keys if k]
    for e in outcome.transcript:
        if e.receiver in ALLOWED_INBOX and e.payload is not None:
            for needle in needles:
                if needle in e.payload:
                    problems.append(f"step {e.step}: ad key sent to {e.receiver}")
                    break
    return problems
