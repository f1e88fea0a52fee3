"""Protocol value types and certificate construction/verification.

Everything here is an immutable value: orders, votes, certificates,
synchronization orders, and the account-info request/response pair. The
byte-level codecs live in wire.py; this module owns the *signed* byte
layouts (payload_bytes / signed_bytes) because signatures are part of the
values themselves.

Value identity rules:
  - an order's identity is its full canonical bytes (fields + sender sig);
  - a settled transfer is keyed by (sender, sequence);
  - certificates with equal orders but different vote sets are equal
    evidence for the same transfer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

from . import crypto
from .errors import (
    AmountOverflow,
    CertificateMismatch,
    DuplicateSigner,
    InvalidSignature,
    MalformedMessage,
    QuorumNotReached,
    UnknownAuthority,
)

U64_MAX = 2**64 - 1
BALANCE_MIN = -(2**127)
BALANCE_MAX = 2**127 - 1
MAX_USER_DATA = 128


class RecipientKind(IntEnum):
    # Tag values are signed and on the wire; never renumber.
    SETTLEMENT = 0
    PRIMARY = 1


@dataclass(frozen=True, slots=True)
class Recipient:
    """Target of a transfer: an in-system account or a primary-ledger address."""

    kind: RecipientKind
    address: bytes

    def __post_init__(self):
        if len(self.address) != crypto.ADDRESS_LEN:
            raise MalformedMessage("recipient address must be 32 bytes")
        if self.kind not in (RecipientKind.SETTLEMENT, RecipientKind.PRIMARY):
            raise MalformedMessage(f"bad recipient kind {self.kind}")

    @classmethod
    def settlement(cls, address: bytes) -> "Recipient":
        return cls(RecipientKind.SETTLEMENT, address)

    @classmethod
    def primary(cls, address: bytes) -> "Recipient":
        return cls(RecipientKind.PRIMARY, address)

    @property
    def is_primary(self) -> bool:
        return self.kind is RecipientKind.PRIMARY

    def encode(self) -> bytes:
        return bytes([self.kind]) + self.address


def check_amount(amount: int) -> int:
    if not isinstance(amount, int) or isinstance(amount, bool):
        raise MalformedMessage("amount must be an integer")
    if amount < 0 or amount > U64_MAX:
        raise AmountOverflow(f"amount {amount} outside u64 range")
    return amount


def check_balance(value: int) -> int:
    if value < BALANCE_MIN or value > BALANCE_MAX:
        raise AmountOverflow("balance outside signed 128-bit range")
    return value


@dataclass(frozen=True, slots=True)
class TransferOrder:
    """A sender-signed spend of `amount` at this account's `sequence`.

    `sender_key` is the verification key whose hash is `sender`; carrying
    it makes the order self-verifying. The signature covers every other
    field, tag bytes included.
    """

    sender: bytes
    sender_key: bytes
    recipient: Recipient
    amount: int
    sequence: int
    user_data: bytes
    signature: bytes

    def __post_init__(self):
        if len(self.sender) != crypto.ADDRESS_LEN:
            raise MalformedMessage("sender address must be 32 bytes")
        if len(self.sender_key) != crypto.KEY_LEN:
            raise MalformedMessage("sender key must be 32 bytes")
        check_amount(self.amount)
        if self.sequence < 0 or self.sequence > U64_MAX:
            raise MalformedMessage("sequence outside u64 range")
        if len(self.user_data) > MAX_USER_DATA:
            raise MalformedMessage(f"user_data exceeds {MAX_USER_DATA} bytes")
        if len(self.signature) != crypto.SIGNATURE_LEN:
            raise MalformedMessage("signature must be 64 bytes")

    def payload_bytes(self) -> bytes:
        """The bytes the sender signs: all fields except the signature."""
        return b"".join(
            (
                self.sender,
                self.sender_key,
                self.recipient.encode(),
                struct.pack("<QQ", self.amount, self.sequence),
                struct.pack("<I", len(self.user_data)),
                self.user_data,
            )
        )

    def signed_bytes(self) -> bytes:
        """Canonical full encoding; what authorities endorse."""
        return self.payload_bytes() + self.signature

    def digest(self) -> bytes:
        import hashlib

        return hashlib.sha256(self.signed_bytes()).digest()


@dataclass(frozen=True, slots=True)
class SignedTransferOrder:
    """One authority's endorsement (vote) over a transfer order."""

    order: TransferOrder
    authority: bytes
    authority_signature: bytes

    def __post_init__(self):
        if len(self.authority) != crypto.KEY_LEN:
            raise MalformedMessage("authority name must be 32 bytes")
        if len(self.authority_signature) != crypto.SIGNATURE_LEN:
            raise MalformedMessage("authority signature must be 64 bytes")


@dataclass(frozen=True, slots=True)
class CertifiedTransfer:
    """A transfer order plus a quorum of authority votes: finality evidence."""

    order: TransferOrder
    signatures: tuple[tuple[bytes, bytes], ...]

    def key(self) -> tuple[bytes, int]:
        return (self.order.sender, self.order.sequence)

    def signers(self) -> tuple[bytes, ...]:
        return tuple(name for name, _ in self.signatures)


@dataclass(frozen=True, slots=True)
class PrimarySynchronizationOrder:
    """Credit instruction from the primary ledger, sequentially indexed."""

    transaction_index: int
    recipient: bytes
    amount: int

    def __post_init__(self):
        if self.transaction_index < 0 or self.transaction_index > U64_MAX:
            raise MalformedMessage("transaction index outside u64 range")
        if len(self.recipient) != crypto.ADDRESS_LEN:
            raise MalformedMessage("recipient address must be 32 bytes")
        check_amount(self.amount)


@dataclass(frozen=True, slots=True)
class FundingTransaction:
    """Primary-ledger deposit to be credited to a settlement account."""

    recipient: bytes
    amount: int

    def __post_init__(self):
        if len(self.recipient) != crypto.ADDRESS_LEN:
            raise MalformedMessage("recipient address must be 32 bytes")
        check_amount(self.amount)


@dataclass(frozen=True, slots=True)
class RedeemTransaction:
    """Primary-ledger spend of a certificate whose recipient is a primary address."""

    certificate: CertifiedTransfer


@dataclass(frozen=True, slots=True)
class CrossShardUpdate:
    """Credit the recipient's shard with a settled certificate."""

    shard_id: int
    certificate: CertifiedTransfer


@dataclass(frozen=True, slots=True)
class AccountInfoRequest:
    address: bytes
    confirmed_start: Optional[int] = None
    confirmed_count: int = 0
    include_received: bool = False
    include_synchronized: bool = False

    def __post_init__(self):
        if len(self.address) != crypto.ADDRESS_LEN:
            raise MalformedMessage("address must be 32 bytes")
        if self.confirmed_start is not None and self.confirmed_start < 0:
            raise MalformedMessage("negative range start")
        if self.confirmed_count < 0:
            raise MalformedMessage("negative range count")


@dataclass(frozen=True, slots=True)
class AccountInfoResponse:
    """Atomic snapshot of one account at one authority shard."""

    address: bytes
    balance: int
    next_sequence: int
    pending: Optional[SignedTransferOrder] = None
    confirmed: tuple[CertifiedTransfer, ...] = ()
    received: tuple[CertifiedTransfer, ...] = ()
    synchronized: tuple[PrimarySynchronizationOrder, ...] = ()


@dataclass(frozen=True, slots=True)
class ErrorResponse:
    code: int
    detail: str = ""


def sign_transfer_order(
    keypair: crypto.KeyPair,
    recipient: Recipient,
    amount: int,
    sequence: int,
    user_data: bytes = b"",
) -> TransferOrder:
    """Build and sign an order for the account owned by `keypair`."""
    unsigned = TransferOrder(
        sender=keypair.address,
        sender_key=keypair.public_bytes,
        recipient=recipient,
        amount=check_amount(amount),
        sequence=sequence,
        user_data=user_data,
        signature=b"\x00" * crypto.SIGNATURE_LEN,
    )
    sig = keypair.sign(crypto.TAG_ORDER, unsigned.payload_bytes())
    return TransferOrder(
        sender=unsigned.sender,
        sender_key=unsigned.sender_key,
        recipient=recipient,
        amount=unsigned.amount,
        sequence=sequence,
        user_data=user_data,
        signature=sig,
    )


def verify_order_signature(order: TransferOrder) -> None:
    """Raise InvalidSignature unless the order is self-consistently signed."""
    if crypto.derive_address(order.sender_key) != order.sender:
        raise InvalidSignature("sender key does not derive sender address")
    crypto.verify(order.sender_key, crypto.TAG_ORDER, order.payload_bytes(), order.signature)


def authority_sign_order(keypair: crypto.KeyPair, order: TransferOrder) -> SignedTransferOrder:
    """Produce this authority's vote over the full order bytes."""
    sig = keypair.sign(crypto.TAG_VOTE, order.signed_bytes())
    return SignedTransferOrder(order=order, authority=keypair.public_bytes, authority_signature=sig)


def verify_signed_order(committee, signed: SignedTransferOrder) -> None:
    """Check a single vote: committee membership plus both signatures."""
    if signed.authority not in committee.members:
        raise UnknownAuthority(f"vote from non-member {signed.authority.hex()[:8]}")
    verify_order_signature(signed.order)
    crypto.verify(
        signed.authority,
        crypto.TAG_VOTE,
        signed.order.signed_bytes(),
        signed.authority_signature,
    )


def aggregate_certificate(
    committee,
    order: TransferOrder,
    partials: Sequence[SignedTransferOrder],
) -> CertifiedTransfer:
    """Combine votes into a certificate; deduplicates repeat signers.

    Fails below quorum, on a vote from outside the committee, on a vote
    for different order bytes, or on an invalid vote signature.
    """
    order_bytes = order.signed_bytes()
    seen: dict[bytes, bytes] = {}
    for partial in partials:
        if partial.order.signed_bytes() != order_bytes:
            raise CertificateMismatch("vote covers a different order")
        if partial.authority not in committee.members:
            raise UnknownAuthority(f"vote from non-member {partial.authority.hex()[:8]}")
        crypto.verify(partial.authority, crypto.TAG_VOTE, order_bytes, partial.authority_signature)
        seen.setdefault(partial.authority, partial.authority_signature)
    threshold = committee.quorum_threshold()
    if len(seen) < threshold:
        raise QuorumNotReached(f"{len(seen)} distinct signers, need {threshold}")
    # Canonical signer order for stable bytes.
    items = tuple(sorted(seen.items()))
    return CertifiedTransfer(order=order, signatures=items)


def verify_certificate(committee, cert: CertifiedTransfer) -> None:
    """Full certificate check: membership, dedup, quorum, all signatures.

    Signatures (the sender's plus every vote) are verified in one batch
    pass after the structural checks.
    """
    names = cert.signers()
    if len(set(names)) != len(names):
        raise DuplicateSigner("repeated authority in certificate")
    for name in names:
        if name not in committee.members:
            raise UnknownAuthority(f"signer {name.hex()[:8]} not in committee")
    threshold = committee.quorum_threshold()
    if len(names) < threshold:
        raise QuorumNotReached(f"{len(names)} signers, need {threshold}")
    if crypto.derive_address(cert.order.sender_key) != cert.order.sender:
        raise InvalidSignature("sender key does not derive sender address")
    order_payload = cert.order.payload_bytes()
    order_bytes = order_payload + cert.order.signature
    batch = [(cert.order.sender_key, crypto.TAG_ORDER, order_payload, cert.order.signature)]
    batch.extend(
        (name, crypto.TAG_VOTE, order_bytes, sig) for name, sig in cert.signatures
    )
    crypto.verify_batch(batch)
