"""Prime-order groups for pairwise Diffie-Hellman secrets.

Only two operations are needed by the blinding layer: raising the generator to
a scalar (public key) and raising a peer's public element to a scalar (shared
secret). Elements travel as bytes.

``P256Group`` is the production instantiation. ``ModPGroup`` works in the
order-q subgroup of Z_p^* for a safe prime p = 2q + 1; the RFC 3526 2048-bit
group is provided for interoperability and a 64-bit toy group for fast unit
tests (flagged insecure).
"""

from __future__ import annotations

import functools
import random
from dataclasses import dataclass

from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import InvalidElementError

_RFC3526_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)
# p = 2q + 1 with q prime; 64-bit, for tests only
_TOY_P = 0xA2DA95A87D867BC3

_P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


class Group:
    """Interface shared by the concrete groups."""

    name: str
    order: int
    insecure: bool

    def random_scalar(self, rng: random.Random) -> int:
        return rng.randrange(1, self.order)

    def base_power(self, scalar: int) -> bytes:
        raise NotImplementedError

    def power(self, element: bytes, scalar: int) -> bytes:
        raise NotImplementedError

    def validate(self, element: bytes) -> None:
        raise NotImplementedError


@dataclass(frozen=True)
class ModPGroup(Group):
    """Quadratic-residue subgroup of Z_p^*, p a safe prime."""

    p: int
    g: int
    name: str
    insecure: bool = False

    @property
    def order(self) -> int:
        return (self.p - 1) // 2

    @property
    def element_size(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def _encode(self, value: int) -> bytes:
        return value.to_bytes(self.element_size, "big")

    def _decode(self, element: bytes) -> int:
        if len(element) != self.element_size:
            raise InvalidElementError(f"element must be {self.element_size} bytes")
        y = int.from_bytes(element, "big")
        if not 1 < y < self.p or pow(y, self.order, self.p) != 1:
            raise InvalidElementError("not a non-identity element of the prime-order subgroup")
        return y

    def validate(self, element: bytes) -> None:
        self._decode(element)

    def base_power(self, scalar: int) -> bytes:
        return self._encode(pow(self.g, scalar, self.p))

    def power(self, element: bytes, scalar: int) -> bytes:
        return self._encode(pow(self._decode(element), scalar, self.p))

    @classmethod
    def rfc3526_2048(cls) -> "ModPGroup":
        return cls(_RFC3526_2048, 2, "modp-2048")

    @classmethod
    def toy(cls) -> "ModPGroup":
        """64-bit group. Breakable in seconds; unit tests only."""
        return cls(_TOY_P, 4, "toy-modp-64", insecure=True)


@functools.lru_cache(maxsize=4096)
def _p256_private(scalar: int) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(scalar, ec.SECP256R1())


@functools.lru_cache(maxsize=1 << 16)
def _p256_public(element: bytes) -> ec.EllipticCurvePublicKey:
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), element)
    except ValueError as exc:
        raise InvalidElementError(f"not a P-256 point: {exc}") from None


@dataclass(frozen=True)
class P256Group(Group):
    """NIST P-256 (prime order, cofactor 1) via OpenSSL.

    Public elements are SEC1 compressed points (33 bytes). The shared secret is
    the x-coordinate of the product point, which is symmetric in the two
    parties and so suffices as its encoding.
    """

    name: str = "p256"
    insecure: bool = False

    @property
    def order(self) -> int:
        return _P256_ORDER

    element_size = 33

    def validate(self, element: bytes) -> None:
        # from_encoded_point rejects off-curve points and the identity encoding
        _p256_public(bytes(element))

    def base_power(self, scalar: int) -> bytes:
        return _p256_private(scalar).public_key().public_bytes(
            Encoding.X962, PublicFormat.CompressedPoint
        )

    def power(self, element: bytes, scalar: int) -> bytes:
        return _p256_private(scalar).exchange(ec.ECDH(), _p256_public(bytes(element)))


GROUPS = {
    "p256": P256Group,
    "modp-2048": ModPGroup.rfc3526_2048,
    "toy-modp-64": ModPGroup.toy,
}


def group_by_name(name: str) -> Group:
    try:
        return GROUPS[name]()
    except KeyError:
        raise ValueError(f"unknown group {name!r}; choose from {sorted(GROUPS)}") from None
