"""Additive blinding of sketch reports with pairwise Diffie-Hellman masks.

Every user ``i`` in a roster of ``N`` holds a key pair ``(x_i, y_i = g^x_i)``.
For round ``s`` and cell ``m`` user ``i`` derives

    b_i[m] = sum_{j != i} sign(i, j) * H(y_j^x_i || m || s)   (mod 2**32)

with ``sign(i, j) = +1`` if ``i > j`` else ``-1``. Each pair contributes the same
hash value with opposite signs to its two members, so the masks of a full
roster sum to zero in every cell.

``H(k || m || s)`` is realised as a keyed stream: a 128-bit AES key is derived
from SHA-256 over the pair secret and the round tag, and cell ``m`` takes the
``m``-th little-endian 32-bit word of the AES-CTR keystream. One cipher call
then yields all ``M`` cell hashes of a pair.

When users drop out, survivors re-derive masks over the surviving roster with
the round tag extended by a retry counter, so adjusted masks never coincide
with the originals.
"""

from __future__ import annotations

import functools
import hashlib
import random
import secrets
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (
    IncompatibleSketchError,
    IncompleteRosterError,
    IndexNotInRosterError,
    LengthMismatchError,
    MalformedHeaderError,
    ShapeMismatchError,
    TruncatedPayloadError,
)
from .groups import Group, group_by_name
from .sketch import CountMinSketch, SketchParams

_KDF_LABEL = b"adcount/blind/v1"


# ---------------------------------------------------------------------------
# Keys and rosters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UserKeyPair:
    index: int
    private: int = field(repr=False)
    public: bytes
    group: Group


def keygen(group: Group, seed=None, index: int = 1) -> UserKeyPair:
    """Draw a private scalar and its public element.

    ``seed`` makes generation reproducible (simulation and tests only);
    ``None`` draws from the OS CSPRNG.
    """
    rng = secrets.SystemRandom() if seed is None else random.Random(seed)
    x = group.random_scalar(rng)
    return UserKeyPair(index=index, private=x, public=group.base_power(x), group=group)


@dataclass(frozen=True)
class Roster:
    """Ordered public keys for one round. Indices run 1..N without gaps."""

    members: tuple[tuple[int, bytes], ...]
    round_tag: int
    group_name: str = "p256"

    def __post_init__(self) -> None:
        indices = [i for i, _ in self.members]
        if indices != list(range(1, len(indices) + 1)):
            raise ValueError(f"roster indices must be 1..N in order, got {indices[:10]}...")
        if not 0 <= self.round_tag < 1 << 64:
            raise ValueError("round tag must fit in 64 bits")

    @classmethod
    def from_keypairs(cls, keypairs: Iterable[UserKeyPair], round_tag: int) -> "Roster":
        keypairs = sorted(keypairs, key=lambda kp: kp.index)
        group_name = keypairs[0].group.name if keypairs else "p256"
        return cls(tuple((kp.index, kp.public) for kp in keypairs), round_tag, group_name)

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.members]

    def public_key(self, index: int) -> bytes:
        if not 1 <= index <= len(self.members):
            raise IndexNotInRosterError(f"index {index} not in roster of size {self.size}")
        return self.members[index - 1][1]

    def with_round(self, round_tag: int) -> "Roster":
        return Roster(self.members, round_tag, self.group_name)

    def to_text(self) -> str:
        lines = ["# adcount roster v1", f"round {self.round_tag}", f"group {self.group_name}"]
        lines += [f"{i} {pub.hex()}" for i, pub in self.members]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Roster":
        round_tag = None
        group_name = "p256"
        members = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(" ")
            try:
                if key == "round":
                    round_tag = int(value)
                elif key == "group":
                    group_name = value.strip()
                else:
                    members.append((int(key), bytes.fromhex(value.strip())))
            except ValueError as exc:
                raise ValueError(f"roster line {lineno}: {exc}") from None
        if round_tag is None:
            raise ValueError("roster has no 'round' line")
        roster = cls(tuple(members), round_tag, group_name)
        group = group_by_name(group_name)
        for _, pub in roster.members:
            group.validate(pub)
        return roster


def pair_secret(me: UserKeyPair, other_public: bytes) -> bytes:
    """Encoding of ``other_public ** me.private``; symmetric between the two users."""
    return _shared_secret(me.group, me.private, bytes(other_public))


@functools.lru_cache(maxsize=1 << 18)
def _shared_secret(group: Group, private: int, other_public: bytes) -> bytes:
    # pair secrets do not depend on the round, so clients keep them across weeks
    return group.power(other_public, private)


# ---------------------------------------------------------------------------
# Cell hashes and blinding vectors
# ---------------------------------------------------------------------------


def _round_suffix(round_tag: int, retry: int) -> bytes:
    return struct.pack("<QI", round_tag, retry)


def stream_key(secret: bytes, round_tag: int, retry: int = 0) -> bytes:
    material = _KDF_LABEL + len(secret).to_bytes(2, "big") + secret + _round_suffix(round_tag, retry)
    return hashlib.sha256(material).digest()[:16]


_ZEROS: dict[int, bytes] = {}


def cell_hashes(secret: bytes, cell_count: int, round_tag: int, retry: int = 0) -> np.ndarray:
    """``H(secret || m || s)`` for ``m = 0..cell_count-1`` as uint32."""
    zeros = _ZEROS.get(cell_count)
    if zeros is None:
        zeros = _ZEROS.setdefault(cell_count, bytes(4 * cell_count))
    enc = Cipher(algorithms.AES(stream_key(secret, round_tag, retry)), modes.CTR(bytes(16))).encryptor()
    return np.frombuffer(enc.update(zeros), dtype="<u4")


@dataclass
class BlindingVector:
    round_tag: int
    retry: int
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def _check_member(me: UserKeyPair, roster: Roster) -> None:
    if not 1 <= me.index <= roster.size or roster.public_key(me.index) != me.public:
        raise IndexNotInRosterError(f"user {me.index} is not in the roster with this key")


def _vector(me: UserKeyPair, roster: Roster, cell_count: int, skip: frozenset[int],
            retry: int) -> BlindingVector:
    if cell_count < 1:
        raise ValueError("cell_count must be >= 1")
    _check_member(me, roster)
    acc = np.zeros(cell_count, dtype=np.uint32)
    for j, public in roster.members:
        if j == me.index or j in skip:
            continue
        h = cell_hashes(pair_secret(me, public), cell_count, roster.round_tag, retry)
        if me.index > j:
            acc += h
        else:
            acc -= h
    return BlindingVector(roster.round_tag, retry, acc)


def blinding_vector(me: UserKeyPair, roster: Roster, cell_count: int) -> BlindingVector:
    """Mask for user ``me`` over the full roster at ``roster.round_tag``."""
    return _vector(me, roster, cell_count, frozenset(), 0)


def adjust_blinding(me: UserKeyPair, roster: Roster, missing: Iterable[int], cell_count: int,
                    retry: int = 1) -> BlindingVector:
    """Mask over the surviving roster (everyone not in ``missing``)."""
    missing = frozenset(missing)
    if me.index in missing:
        raise ValueError(f"user {me.index} is listed as missing")
    unknown = missing - set(roster.indices)
    if unknown:
        raise IndexNotInRosterError(f"missing indices {sorted(unknown)} not in roster")
    return _vector(me, roster, cell_count, missing, retry)


def blinding_vectors_batch(keypairs: Sequence[UserKeyPair], roster: Roster, cell_count: int,
                           missing: Iterable[int] = (), retry: int = 0) -> dict[int, BlindingVector]:
    """All survivors' masks at once, deriving each pair's hashes a single time.

    Produces exactly what each survivor would compute alone with
    ``blinding_vector``/``adjust_blinding``, at half the cost. It needs every
    survivor's private key, so it is only usable where one process plays all
    clients (the simulator).
    """
    missing = frozenset(missing)
    by_index = {kp.index: kp for kp in keypairs}
    survivors = [i for i in roster.indices if i not in missing]
    absent = [i for i in survivors if i not in by_index]
    if absent:
        raise IndexNotInRosterError(f"no key pair for survivors {absent[:10]}")
    for i in survivors:
        _check_member(by_index[i], roster)
    acc = {i: np.zeros(cell_count, dtype=np.uint32) for i in survivors}
    for a, i in enumerate(survivors):
        me = by_index[i]
        for j in survivors[a + 1:]:
            h = cell_hashes(pair_secret(me, roster.public_key(j)), cell_count, roster.round_tag, retry)
            acc[i] -= h  # i < j
            acc[j] += h
    return {i: BlindingVector(roster.round_tag, retry, v) for i, v in acc.items()}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

_REPORT_MAGIC = b"BRPT"
_REPORT_VERSION = 1
_REPORT_HEADER = struct.Struct("<4sHHQI16sI")
REPORT_HEADER_SIZE = _REPORT_HEADER.size


@dataclass
class BlindedReport:
    """A user's masked sketch cells, flattened row-major.

    Wire layout: magic ``BRPT``, version u16, retry u16, round tag u64,
    user index u32, 16-byte sketch-params digest, cell count u32, then the
    cells as little-endian uint32.
    """

    round_tag: int
    retry: int
    user_index: int
    params_digest: bytes
    cells: np.ndarray

    def to_bytes(self) -> bytes:
        header = _REPORT_HEADER.pack(
            _REPORT_MAGIC, _REPORT_VERSION, self.retry, self.round_tag,
            self.user_index, self.params_digest, len(self.cells),
        )
        return header + self.cells.astype("<u4", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlindedReport":
        if len(data) < REPORT_HEADER_SIZE:
            raise TruncatedPayloadError("report shorter than its header")
        magic, version, retry, round_tag, user, digest, count = _REPORT_HEADER.unpack_from(data)
        if magic != _REPORT_MAGIC or version != _REPORT_VERSION:
            raise MalformedHeaderError("not a version-1 blinded report")
        expected = REPORT_HEADER_SIZE + 4 * count
        if len(data) < expected:
            raise TruncatedPayloadError(f"report needs {expected} bytes, got {len(data)}")
        if len(data) > expected:
            raise MalformedHeaderError("trailing bytes after report cells")
        cells = np.frombuffer(data, dtype="<u4", count=count, offset=REPORT_HEADER_SIZE)
        return cls(round_tag, retry, user, digest, cells.astype(np.uint32))

    @property
    def byte_length(self) -> int:
        return REPORT_HEADER_SIZE + 4 * len(self.cells)


def blind_cells(sketch: CountMinSketch, bv: BlindingVector, user_index: int) -> BlindedReport:
    flat = sketch.cells.ravel()
    if len(bv.values) != flat.size:
        raise LengthMismatchError(f"blinding vector has {len(bv.values)} cells, sketch {flat.size}")
    return BlindedReport(bv.round_tag, bv.retry, user_index, sketch.params.digest(), flat + bv.values)


def unblind_cells(report: BlindedReport, bv: BlindingVector) -> np.ndarray:
    """Remove one user's own mask (inverse of ``blind_cells``)."""
    if len(bv.values) != len(report.cells):
        raise LengthMismatchError("blinding vector and report differ in length")
    return report.cells - bv.values


def sum_reports(reports: Sequence[BlindedReport]) -> np.ndarray:
    acc = np.zeros(len(reports[0].cells), dtype=np.uint32)
    for r in reports:
        acc += r.cells
    return acc


def unblind_aggregate(reports: Sequence[BlindedReport], params: SketchParams,
                      expected: Iterable[int]) -> CountMinSketch:
    """Sum a complete set of reports; the masks cancel and the plain merge remains.

    ``expected`` is the set of roster indices whose masks are in play: the full
    roster, or the survivors after an adjustment round.
    """
    expected = set(expected)
    if not reports:
        raise IncompleteRosterError(missing=expected)
    digest = params.digest()
    for r in reports:
        if r.params_digest != digest:
            raise IncompatibleSketchError(f"report from user {r.user_index} uses other sketch params")
        if len(r.cells) != params.cell_count:
            raise ShapeMismatchError(f"report from user {r.user_index} has {len(r.cells)} cells")
    tags = {(r.round_tag, r.retry) for r in reports}
    if len(tags) != 1:
        raise ShapeMismatchError(f"reports mix round tags {sorted(tags)}")
    senders = [r.user_index for r in reports]
    if len(set(senders)) != len(senders):
        raise ValueError("duplicate report in aggregate")
    got = set(senders)
    if got != expected:
        raise IncompleteRosterError(missing=expected - got, unexpected=got - expected)
    return CountMinSketch(params, sum_reports(reports))


def check_zero_sum(vectors: Mapping[int, BlindingVector] | Sequence[BlindingVector]) -> bool:
    vs = vectors.values() if isinstance(vectors, Mapping) else vectors
    acc = None
    for v in vs:
        acc = v.values.copy() if acc is None else acc + v.values
    return acc is None or not acc.any()
