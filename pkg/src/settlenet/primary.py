"""Simulated primary-ledger contract.

Holds the escrowed total for the settlement committee, assigns sequential
transaction indices to funding, and redeems outbound certificates exactly
once per (sender, sequence). Trusted by construction: the real system
would run this logic on the main ledger itself.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

from .committee import Committee
from .core import (
    FundingTransaction,
    PrimarySynchronizationOrder,
    RedeemTransaction,
    check_balance,
    verify_certificate,
)
from .errors import AlreadyRedeemed, InsolvencyDetected, InvalidAmount, MalformedMessage, NotPrimaryRecipient


class PrimaryState:
    def __init__(self, committee: Committee):
        self.committee = committee
        # Per-sender set of already-redeemed sequence numbers.
        self.redeem_logs: dict[bytes, set[int]] = {}
        self.total_balance = 0
        self.last_transaction = 0
        # Funding history, re-playable as synchronization orders.
        self.funding_log: list[PrimarySynchronizationOrder] = []
        # Credits paid out to primary-ledger recipients (conservation checks).
        self.redeemed_to: dict[bytes, int] = {}

    def handle_funding_transaction(self, tx: FundingTransaction) -> PrimarySynchronizationOrder:
        if tx.amount == 0:
            raise InvalidAmount("funding amount must be positive")
        self.total_balance = check_balance(self.total_balance + tx.amount)
        self.last_transaction += 1
        sync = PrimarySynchronizationOrder(
            transaction_index=self.last_transaction, recipient=tx.recipient, amount=tx.amount
        )
        self.funding_log.append(sync)
        return sync

    def handle_redeem_transaction(self, tx: RedeemTransaction) -> None:
        cert = tx.certificate
        verify_certificate(self.committee, cert)
        if not cert.order.recipient.is_primary:
            raise NotPrimaryRecipient("certificate pays a settlement address")
        sender, sequence = cert.key()
        log = self.redeem_logs.setdefault(sender, set())
        if sequence in log:
            raise AlreadyRedeemed(f"sequence {sequence} already redeemed for this sender")
        amount = cert.order.amount
        if amount > self.total_balance:
            # Reachable only if more than f authorities misbehave; the safety
            # suite treats this firing as a failed run.
            raise InsolvencyDetected(
                f"redeem of {amount} exceeds escrowed total {self.total_balance}"
            )
        log.add(sequence)
        self.total_balance -= amount
        to = cert.order.recipient.address
        self.redeemed_to[to] = self.redeemed_to.get(to, 0) + amount

    def funded_total(self) -> int:
        return sum(s.amount for s in self.funding_log)

    def redeemed_total(self) -> int:
        return sum(self.redeemed_to.values())

    # -- Snapshot ----------------------------------------------------------

    def to_snapshot(self) -> dict:
        return {
            "format": "settlenet-primary-1",
            "total_balance": self.total_balance,
            "last_transaction": self.last_transaction,
            "funding": [
                {"index": s.transaction_index, "recipient": s.recipient.hex(), "amount": s.amount}
                for s in self.funding_log
            ],
            "redeem_logs": {
                sender.hex(): sorted(seqs) for sender, seqs in self.redeem_logs.items()
            },
            "redeemed_to": {addr.hex(): amount for addr, amount in self.redeemed_to.items()},
        }

    def save_snapshot(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_snapshot(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_snapshot(cls, committee: Committee, doc: dict) -> "PrimaryState":
        if doc.get("format") != "settlenet-primary-1":
            raise MalformedMessage("not a primary snapshot")
        state = cls(committee)
        state.total_balance = int(doc["total_balance"])
        state.last_transaction = int(doc["last_transaction"])
        state.funding_log = [
            PrimarySynchronizationOrder(
                transaction_index=int(row["index"]),
                recipient=bytes.fromhex(row["recipient"]),
                amount=int(row["amount"]),
            )
            for row in doc["funding"]
        ]
        state.redeem_logs = {
            bytes.fromhex(sender): set(seqs) for sender, seqs in doc["redeem_logs"].items()
        }
        state.redeemed_to = {
            bytes.fromhex(addr): int(amount) for addr, amount in doc["redeemed_to"].items()
        }
        return state

    @classmethod
    def load_snapshot(cls, committee: Committee, path: Union[str, Path]) -> "PrimaryState":
        return cls.from_snapshot(committee, json.loads(Path(path).read_text()))
