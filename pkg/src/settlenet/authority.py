"""Per-shard authority state machine.

Each shard owns a disjoint slice of the account space and is driven by a
single writer. The four handlers are deterministic functions of (state,
message) and idempotent under replay:

  - transfer orders:   validate and countersign, locking the sequence;
  - confirmations:     settle a certificate (debit, advance, credit);
  - cross-shard commits: credit a recipient owned by this shard;
  - synchronization orders: credit primary-ledger funding in index order.

Negative balances are allowed here: settlement debits unconditionally
once the certificate checks pass, because the matching credits may still
be in flight on the inter-shard channel. Client-side checks keep honest
accounts non-negative; the invariants that make this safe are enforced
end to end by the sim oracle and the auditor.
"""

from __future__ import annotations

import base64
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Optional

from . import crypto, wire
from .committee import Committee, ShardAssignment
from .core import (
    AccountInfoRequest,
    AccountInfoResponse,
    CertifiedTransfer,
    CrossShardUpdate,
    PrimarySynchronizationOrder,
    SignedTransferOrder,
    TransferOrder,
    authority_sign_order,
    check_balance,
    verify_certificate,
    verify_order_signature,
)
from .errors import (
    InvalidAmount,
    InsufficientFunds,
    MalformedMessage,
    MissingEarlierConfirmations,
    PreviousTransferPending,
    PrimaryRecipient,
    SyncOrderGap,
    UnexpectedSequence,
    UnknownAccount,
    UnknownSenderAccount,
    WrongShard,
)

DUMP_MAGIC = "SNDUMP1"


@dataclass
class AccountOffchainState:
    """One account as this shard sees it."""

    owner_key: Optional[bytes] = None
    balance: int = 0
    next_sequence: int = 0
    pending: Optional[SignedTransferOrder] = None
    confirmed: list[CertifiedTransfer] = field(default_factory=list)
    received: list[CertifiedTransfer] = field(default_factory=list)
    synchronized: list[PrimarySynchronizationOrder] = field(default_factory=list)
    # Transient dedup index over `received`, rebuilt on restore.
    received_keys: set = field(default_factory=set)


class AuthorityState:
    """State and handlers for one shard of one authority."""

    def __init__(
        self,
        keypair: crypto.KeyPair,
        committee: Committee,
        shard_id: int = 0,
        num_shards: int = 1,
    ):
        if keypair.public_bytes not in committee.members:
            raise MalformedMessage("authority key not in committee")
        if not 0 <= shard_id < num_shards:
            raise MalformedMessage(f"shard {shard_id} out of range")
        self.keypair = keypair
        self.name = keypair.public_bytes
        self.committee = committee
        self.shards = ShardAssignment(num_shards)
        self.shard_id = shard_id
        self.accounts: dict[bytes, AccountOffchainState] = {}
        self.last_transaction = 0

    def in_shard(self, address: bytes) -> bool:
        return self.shards.which_shard(address) == self.shard_id

    def _require_shard(self, address: bytes) -> None:
        if not self.in_shard(address):
            raise WrongShard(
                f"address maps to shard {self.shards.which_shard(address)}, this is {self.shard_id}"
            )

    def _or_insert(self, address: bytes) -> AccountOffchainState:
        account = self.accounts.get(address)
        if account is None:
            account = AccountOffchainState()
            self.accounts[address] = account
        return account

    def _credit(self, address: bytes, cert: CertifiedTransfer) -> None:
        account = self._or_insert(address)
        account.balance = check_balance(account.balance + cert.order.amount)
        account.received.append(cert)
        account.received_keys.add(cert.key())

    def handle_transfer_order(self, order: TransferOrder) -> SignedTransferOrder:
        self._require_shard(order.sender)
        verify_order_signature(order)
        account = self.accounts.get(order.sender)
        if account is None:
            raise UnknownSenderAccount(f"no account {order.sender.hex()[:8]}")
        if account.pending is not None:
            if account.pending.order == order:
                return account.pending
            raise PreviousTransferPending(
                f"sequence {account.pending.order.sequence} already locked by another order"
            )
        if order.amount == 0:
            raise InvalidAmount("amount must be positive")
        if order.sequence != account.next_sequence:
            raise UnexpectedSequence(
                f"order sequence {order.sequence}, account expects {account.next_sequence}"
            )
        if order.amount > account.balance:
            raise InsufficientFunds(f"amount {order.amount} exceeds balance {account.balance}")
        if account.owner_key is None:
            account.owner_key = order.sender_key
        signed = authority_sign_order(self.keypair, order)
        account.pending = signed
        return signed

    def handle_confirmation_order(
        self, cert: CertifiedTransfer
    ) -> tuple[AccountInfoResponse, Optional[CrossShardUpdate]]:
        sender = cert.order.sender
        self._require_shard(sender)
        verify_certificate(self.committee, cert)
        account = self._or_insert(sender)
        sequence = cert.order.sequence
        if sequence < account.next_sequence:
            # Old certificate: already settled here, nothing to do.
            return self.account_summary(sender), None
        if sequence > account.next_sequence:
            raise MissingEarlierConfirmations(
                f"certificate sequence {sequence}, account at {account.next_sequence}"
            )
        amount = cert.order.amount
        if account.owner_key is None:
            account.owner_key = cert.order.sender_key
        account.balance = check_balance(account.balance - amount)
        account.next_sequence += 1
        account.pending = None
        account.confirmed.append(cert)
        recipient = cert.order.recipient
        update = None
        if recipient.is_primary:
            pass  # Outbound to the primary ledger; redeemed there, no credit here.
        elif self.in_shard(recipient.address):
            self._credit(recipient.address, cert)
        else:
            update = CrossShardUpdate(
                shard_id=self.shards.which_shard(recipient.address), certificate=cert
            )
        return self.account_summary(sender), update

    def handle_cross_shard_commit(self, cert: CertifiedTransfer) -> None:
        recipient = cert.order.recipient
        if recipient.is_primary:
            raise PrimaryRecipient("cross-shard credit to a primary address")
        self._require_shard(recipient.address)
        account = self._or_insert(recipient.address)
        if cert.key() in account.received_keys:
            return  # Delivered before; the channel or a retry replayed it.
        self._credit(recipient.address, cert)

    def handle_primary_synchronization_order(self, sync: PrimarySynchronizationOrder) -> None:
        # Every shard sees every synchronization order and advances its own
        # index; only the recipient's shard applies the credit.
        if sync.transaction_index <= self.last_transaction:
            return
        if sync.transaction_index != self.last_transaction + 1:
            raise SyncOrderGap(
                f"index {sync.transaction_index} after {self.last_transaction}"
            )
        self.last_transaction += 1
        if self.in_shard(sync.recipient):
            account = self._or_insert(sync.recipient)
            account.balance = check_balance(account.balance + sync.amount)
            account.synchronized.append(sync)

    def handle_account_info_query(self, request: AccountInfoRequest) -> AccountInfoResponse:
        self._require_shard(request.address)
        account = self.accounts.get(request.address)
        if account is None:
            raise UnknownAccount(f"no account {request.address.hex()[:8]}")
        confirmed: tuple = ()
        if request.confirmed_start is not None:
            lo = request.confirmed_start
            hi = min(lo + request.confirmed_count, len(account.confirmed))
            confirmed = tuple(account.confirmed[lo:hi])
        received = tuple(account.received) if request.include_received else ()
        synchronized = tuple(account.synchronized) if request.include_synchronized else ()
        return AccountInfoResponse(
            address=request.address,
            balance=account.balance,
            next_sequence=account.next_sequence,
            pending=account.pending,
            confirmed=confirmed,
            received=received,
            synchronized=synchronized,
        )

    def account_summary(self, address: bytes) -> AccountInfoResponse:
        """Small snapshot (no logs) used in confirmation responses."""
        account = self.accounts.get(address)
        if account is None:
            return AccountInfoResponse(address=address, balance=0, next_sequence=0)
        return AccountInfoResponse(
            address=address,
            balance=account.balance,
            next_sequence=account.next_sequence,
            pending=account.pending,
        )

    # -- Canonical dumps ---------------------------------------------------
    # Line-delimited container: a header line, then one base64 record per
    # account in address order. Dumps are byte-stable for equal states, so
    # state hashes and idempotency comparisons work on the raw bytes. The
    # auditor consumes the same format.

    def canonical_dump(self) -> bytes:
        lines = [f"{DUMP_MAGIC} authority {base64.b64encode(self._header_record()).decode()}"]
        for address in sorted(self.accounts):
            record = _encode_account_record(address, self.accounts[address])
            lines.append(base64.b64encode(record).decode())
        return ("\n".join(lines) + "\n").encode()

    def state_hash(self) -> bytes:
        """Digest of shard content only (no authority name), so honest
        peers of the same shard hash identically once they converge."""
        h = hashlib.sha256()
        h.update(struct.pack("<IIQ", self.shard_id, self.shards.num_shards, self.last_transaction))
        for address in sorted(self.accounts):
            h.update(_encode_account_record(address, self.accounts[address]))
        return h.digest()

    def _header_record(self) -> bytes:
        return b"".join(
            (
                self.name,
                struct.pack("<IIQ", self.shard_id, self.shards.num_shards, self.last_transaction),
            )
        )

    @classmethod
    def restore_from_dump(
        cls, keypair: crypto.KeyPair, committee: Committee, dump: bytes
    ) -> "AuthorityState":
        header, records = parse_dump(dump)
        name, shard_id, num_shards, last_transaction = header
        if keypair.public_bytes != name:
            raise MalformedMessage("dump belongs to a different authority")
        state = cls(keypair, committee, shard_id=shard_id, num_shards=num_shards)
        state.last_transaction = last_transaction
        for address, account in records:
            state.accounts[address] = account
        return state


def _encode_account_record(address: bytes, account: AccountOffchainState) -> bytes:
    out: list = [address]
    if account.owner_key is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        out.append(account.owner_key)
    out.append(account.balance.to_bytes(16, "little", signed=True))
    out.append(struct.pack("<Q", account.next_sequence))
    if account.pending is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        wire._encode_signed_order(out, account.pending)
    for certs in (account.confirmed, account.received):
        out.append(struct.pack("<I", len(certs)))
        for cert in certs:
            wire._encode_cert(out, cert)
    out.append(struct.pack("<I", len(account.synchronized)))
    for sync in account.synchronized:
        wire._encode_sync(out, sync)
    return b"".join(out)


def _decode_account_record(record: bytes) -> tuple[bytes, AccountOffchainState]:
    r = wire.Reader(record)
    address = r.take(crypto.ADDRESS_LEN)
    owner_key = r.take(crypto.KEY_LEN) if r.u8() else None
    balance = r.i128()
    next_sequence = r.u64()
    pending = wire._decode_signed_order(r) if r.u8() else None
    confirmed = [wire._decode_cert(r) for _ in range(r.u32())]
    received = [wire._decode_cert(r) for _ in range(r.u32())]
    synchronized = [wire._decode_sync(r) for _ in range(r.u32())]
    r.expect_end()
    account = AccountOffchainState(
        owner_key=owner_key,
        balance=balance,
        next_sequence=next_sequence,
        pending=pending,
        confirmed=confirmed,
        received=received,
        synchronized=synchronized,
        received_keys={c.key() for c in received},
    )
    return address, account


def parse_dump(dump: bytes) -> tuple[tuple, list[tuple[bytes, AccountOffchainState]]]:
    """Parse a canonical shard dump; returns (header fields, account records)."""
    lines = dump.decode().splitlines()
    if not lines or not lines[0].startswith(f"{DUMP_MAGIC} authority "):
        raise MalformedMessage("not an authority dump")
    raw = base64.b64decode(lines[0].split(" ", 2)[2])
    r = wire.Reader(raw)
    name = r.take(crypto.KEY_LEN)
    shard_id, num_shards, last_transaction = struct.unpack("<IIQ", r.take(16))
    r.expect_end()
    records = [_decode_account_record(base64.b64decode(line)) for line in lines[1:] if line]
    return (name, shard_id, num_shards, last_transaction), records
