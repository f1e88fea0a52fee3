"""Signing keys, addresses, and signature verification.

Ed25519 (RFC 8032) gives us deterministic signatures: signing identical
bytes with the same key always yields the same 64 bytes, which the
protocol relies on for idempotent retries. Addresses are the SHA-256 of
the 32-byte verification key.

Verification results are memoized in a bounded cache keyed by the exact
(key, message, signature) bytes. The cache can never be poisoned: a hit
is only possible for a triple that previously verified (or failed) with
identical bytes. This matters for throughput because the same certificate
is re-verified by every authority that settles it.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature as _BadSig
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import InvalidSignature, MalformedMessage

ADDRESS_LEN = 32
KEY_LEN = 32
SIGNATURE_LEN = 64

# Domain separation: account holders sign order payloads, authorities
# endorse serialized orders. Distinct prefixes keep the two spaces apart.
TAG_ORDER = b"xfer-order:"
TAG_VOTE = b"authority-vote:"


def derive_address(verification_key: bytes) -> bytes:
    """Map a 32-byte verification key to its 32-byte account address."""
    if not isinstance(verification_key, (bytes, bytearray)) or len(verification_key) != KEY_LEN:
        raise MalformedMessage(f"verification key must be {KEY_LEN} bytes")
    return hashlib.sha256(bytes(verification_key)).digest()


class KeyPair:
    """An ed25519 signing key plus its raw public key and derived address."""

    __slots__ = ("_signer", "secret_bytes", "public_bytes", "address")

    def __init__(self, secret_bytes: bytes):
        if len(secret_bytes) != KEY_LEN:
            raise MalformedMessage(f"secret key must be {KEY_LEN} bytes")
        self.secret_bytes = bytes(secret_bytes)
        self._signer = Ed25519PrivateKey.from_private_bytes(self.secret_bytes)
        from cryptography.hazmat.primitives import serialization

        self.public_bytes = self._signer.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        self.address = derive_address(self.public_bytes)

    @classmethod
    def generate(cls, rng=None) -> "KeyPair":
        if rng is None:
            import os

            return cls(os.urandom(KEY_LEN))
        return cls(bytes(rng.randrange(256) for _ in range(KEY_LEN)))

    @classmethod
    def from_seed(cls, seed: int) -> "KeyPair":
        """Deterministic key for tests and simulations."""
        return cls(hashlib.sha256(b"keypair-seed:" + seed.to_bytes(8, "little")).digest())

    def sign(self, domain: bytes, message: bytes) -> bytes:
        return self._signer.sign(domain + message)

    def __repr__(self):
        return f"KeyPair(address={self.address.hex()[:8]}…)"


class VerificationCache:
    """Bounded LRU of verification outcomes keyed by exact input bytes."""

    def __init__(self, max_entries: int = 1 << 16):
        self.max_entries = max_entries
        self._entries: OrderedDict[bytes, bool] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def _key(self, key: bytes, domain: bytes, message: bytes, signature: bytes) -> bytes:
        h = hashlib.sha256()
        h.update(key)
        h.update(domain)
        h.update(signature)
        h.update(message)
        return h.digest()

    def clear(self) -> None:
        self._entries.clear()
        self.hits = 0
        self.misses = 0

    def check(self, key: bytes, domain: bytes, message: bytes, signature: bytes) -> bool:
        ck = self._key(key, domain, message, signature)
        cached = self._entries.get(ck)
        if cached is not None:
            self.hits += 1
            self._entries.move_to_end(ck)
            return cached
        self.misses += 1
        ok = _verify_raw(key, domain + message, signature)
        self._entries[ck] = ok
        if len(self._entries) > self.max_entries:
            self._entries.popitem(last=False)
        return ok


_global_cache = VerificationCache()


def _verify_raw(key: bytes, payload: bytes, signature: bytes) -> bool:
    if len(key) != KEY_LEN or len(signature) != SIGNATURE_LEN:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(key).verify(signature, payload)
        return True
    except (_BadSig, ValueError):
        return False


def verify(key: bytes, domain: bytes, message: bytes, signature: bytes, *, cache: bool = True) -> None:
    """Raise InvalidSignature unless `signature` verifies over domain+message."""
    if cache:
        ok = _global_cache.check(key, domain, message, signature)
    else:
        ok = _verify_raw(key, domain + message, signature)
    if not ok:
        raise InvalidSignature("signature check failed")


def verify_batch(items: Iterable[tuple[bytes, bytes, bytes, bytes]]) -> None:
    """Verify a batch of (key, domain, message, signature) in one pass.

    All signatures are checked before the first failure is reported, so a
    caller learns about the batch as a unit. Raises InvalidSignature if any
    entry fails.
    """
    failed = 0
    for key, domain, message, signature in items:
        if not _global_cache.check(key, domain, message, signature):
            failed += 1
    if failed:
        raise InvalidSignature(f"{failed} signature(s) failed in batch")


def cache_stats() -> tuple[int, int]:
    return _global_cache.hits, _global_cache.misses


def clear_cache() -> None:
    """Drop all cached verification outcomes (timing runs want cold checks)."""
    _global_cache.clear()


def deterministic_keypairs(count: int, namespace: str = "") -> Sequence[KeyPair]:
    """A reproducible list of distinct key pairs (fixtures, sims, benches)."""
    out = []
    for i in range(count):
        seed = hashlib.sha256(f"{namespace}:{i}".encode()).digest()
        out.append(KeyPair(seed))
    return out
