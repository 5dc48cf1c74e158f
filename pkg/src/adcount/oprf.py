"""Blind-RSA oblivious PRF mapping ad URLs to ad ids in ``[1, A_size]``.

The keyed function is ``F(d, url) = G(H(url) ** d mod N)`` where ``H`` is a
full-domain hash into Z_N and ``G`` hashes the result to 64 bits. A client
never sees ``d`` and the server never sees ``H(url)``:

    client:  x' = H(url) * r**e           (fresh unit r)
    server:  y  = x' ** d
    client:  y' = y / r = H(url) ** d     (checked: y'**e == H(url))
             id = G(y') mod A_size + 1

On the wire both messages are big-endian integers of the modulus byte length.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import secrets
from dataclasses import dataclass, field

import gmpy2

from .errors import InconsistencyError, OutOfRangeError, TransportError

PUBLIC_EXPONENT = 65537
DEFAULT_A_SIZE = 1 << 20
SECURE_BITS = 2048

_FDH_LABEL = b"adcount/fdh/v1"
_G_LABEL = b"adcount/G/v1"


@dataclass(frozen=True)
class OprfPublicKey:
    modulus: int
    exponent: int
    bits: int
    insecure: bool

    @property
    def byte_length(self) -> int:
        return (self.modulus.bit_length() + 7) // 8

    def to_descriptor(self) -> str:
        """JSON key descriptor; the private exponent is never part of it."""
        return json.dumps(
            {"modulus": hex(self.modulus), "exponent": self.exponent,
             "bits": self.bits, "insecure": self.insecure},
            sort_keys=True,
        )

    @classmethod
    def from_descriptor(cls, text: str) -> "OprfPublicKey":
        obj = json.loads(text)
        return cls(int(obj["modulus"], 16), int(obj["exponent"]), int(obj["bits"]), bool(obj["insecure"]))


@dataclass(frozen=True)
class OprfServerKey:
    public: OprfPublicKey
    d: int = field(repr=False)
    p: int = field(repr=False)
    q: int = field(repr=False)

    @property
    def modulus(self) -> int:
        return self.public.modulus

    def __post_init__(self) -> None:
        phi = (self.p - 1) * (self.q - 1)
        if self.p * self.q != self.public.modulus or (self.public.exponent * self.d) % phi != 1:
            raise ValueError("inconsistent RSA triple")
        # CRT constants; not part of equality
        object.__setattr__(self, "_crt", (
            gmpy2.mpz(self.p), gmpy2.mpz(self.q),
            gmpy2.mpz(self.d % (self.p - 1)), gmpy2.mpz(self.d % (self.q - 1)),
            gmpy2.invert(gmpy2.mpz(self.q), gmpy2.mpz(self.p)),
        ))

    def sign_raw(self, value: int) -> int:
        """``value ** d mod N`` via the CRT."""
        p, q, dp, dq, q_inv = self._crt
        a = gmpy2.powmod(value, dp, p)
        b = gmpy2.powmod(value, dq, q)
        return int(b + ((q_inv * (a - b)) % p) * q)


def _random_prime(bits: int, rng) -> int:
    while True:
        # top two bits set so p*q has exactly 2*bits bits
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and math.gcd(p - 1, PUBLIC_EXPONENT) == 1:
            return p


def oprf_keygen(bits: int = SECURE_BITS, seed=None) -> OprfServerKey:
    """Generate an RSA triple. Keys under 2048 bits are flagged insecure.

    ``seed`` makes generation reproducible for simulations; ``None`` uses the
    OS CSPRNG.
    """
    if bits < 64 or bits % 2:
        raise ValueError("bits must be an even number >= 64")
    rng = secrets.SystemRandom() if seed is None else random.Random(seed)
    while True:
        p = _random_prime(bits // 2, rng)
        q = _random_prime(bits // 2, rng)
        if p != q and (p * q).bit_length() == bits:
            break
    phi = (p - 1) * (q - 1)
    d = int(gmpy2.invert(PUBLIC_EXPONENT, phi))
    public = OprfPublicKey(p * q, PUBLIC_EXPONENT, bits, insecure=bits < SECURE_BITS)
    return OprfServerKey(public, d, p, q)


def _as_bytes(url) -> bytes:
    return url.encode("utf-8") if isinstance(url, str) else bytes(url)


def fdh_hash(url, modulus: int) -> int:
    """Full-domain hash into ``[1, N)`` by counter-mode SHA-256 with rejection."""
    data = _as_bytes(url)
    nbytes = (modulus.bit_length() + 7) // 8
    excess = 8 * nbytes - modulus.bit_length()
    attempt = 0
    while True:
        stream = b"".join(
            hashlib.sha256(
                _FDH_LABEL + attempt.to_bytes(4, "big") + block.to_bytes(4, "big") + data
            ).digest()
            for block in range(-(-nbytes // 32))
        )
        value = int.from_bytes(stream[:nbytes], "big") >> excess
        if 0 < value < modulus:
            return value
        attempt += 1


def output_hash(value: int, public: OprfPublicKey) -> int:
    """``G``: 64-bit hash of the canonical encoding of an element of Z_N."""
    digest = hashlib.sha256(_G_LABEL + value.to_bytes(public.byte_length, "big")).digest()
    return int.from_bytes(digest[:8], "big")


def ad_id_from_output(value: int, public: OprfPublicKey, a_size: int) -> int:
    return output_hash(value, public) % a_size + 1


@dataclass(frozen=True)
class OprfPending:
    r: int = field(repr=False)
    hashed: int = field(repr=False)


def blind_request(url, public: OprfPublicKey, rng=None) -> tuple[int, OprfPending]:
    n = public.modulus
    rng = rng or secrets.SystemRandom()
    while True:
        r = rng.randrange(2, n - 1)
        if math.gcd(r, n) == 1:
            break
    hashed = fdh_hash(url, n)
    request = int(hashed * gmpy2.powmod(r, public.exponent, n) % n)
    return request, OprfPending(r, hashed)


def evaluate(request: int, key: OprfServerKey) -> int:
    if not 0 < request < key.modulus:
        raise OutOfRangeError("request outside (0, N)")
    return key.sign_raw(request)


def finalize(signed: int, pending: OprfPending, public: OprfPublicKey,
             a_size: int = DEFAULT_A_SIZE) -> int:
    n = public.modulus
    unblinded = int(signed * gmpy2.invert(pending.r, n) % n)
    if int(gmpy2.powmod(unblinded, public.exponent, n)) != pending.hashed:
        raise InconsistencyError("server response does not verify against H(url)")
    return ad_id_from_output(unblinded, public, a_size)


# ---------------------------------------------------------------------------
# Wire encoding, server and client endpoints
# ---------------------------------------------------------------------------


def encode_element(value: int, public: OprfPublicKey) -> bytes:
    return value.to_bytes(public.byte_length, "big")


def decode_element(data: bytes, public: OprfPublicKey) -> int:
    if len(data) != public.byte_length:
        raise OutOfRangeError(f"expected {public.byte_length}-byte element, got {len(data)}")
    return int.from_bytes(data, "big")


class OprfServer:
    """Stateless evaluation endpoint (safe to call concurrently)."""

    def __init__(self, key: OprfServerKey):
        self.key = key

    @property
    def public(self) -> OprfPublicKey:
        return self.key.public

    def handle(self, request: bytes) -> bytes:
        return encode_element(evaluate(decode_element(request, self.public), self.key), self.public)


class InProcessTransport:
    """Direct call into an ``OprfServer`` that counts messages and bytes."""

    def __init__(self, server: OprfServer):
        self.server = server
        self.messages = 0
        self.bytes_sent = 0
        self.bytes_received = 0
        self.fail = False

    def exchange(self, request: bytes) -> bytes:
        if self.fail:
            raise TransportError("oprf server unreachable")
        self.messages += 1
        self.bytes_sent += len(request)
        response = self.server.handle(request)
        self.messages += 1
        self.bytes_received += len(response)
        return response


class OprfClient:
    """Client side of the mapping with a per-user cache of finished ids."""

    def __init__(self, public: OprfPublicKey, transport, a_size: int = DEFAULT_A_SIZE, rng=None):
        self.public = public
        self.transport = transport
        self.a_size = a_size
        self.rng = rng or secrets.SystemRandom()
        self.cache: dict[str, int] = {}

    def map_url(self, url: str) -> int:
        cached = self.cache.get(url)
        if cached is not None:
            return cached
        request, pending = blind_request(url, self.public, self.rng)
        response = self.transport.exchange(encode_element(request, self.public))
        ad_id = finalize(decode_element(response, self.public), pending, self.public, self.a_size)
        self.cache[url] = ad_id
        return ad_id
