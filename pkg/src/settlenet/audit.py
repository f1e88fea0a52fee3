"""Offline invariant audit over authority state dumps.

Rebuilds the union of certified transfers found in every dump, verifies
each stored signature, and checks the books an honest authority must
keep: contiguous confirmed logs, balances explained by recorded funding,
credits, and debits, synchronization entries matching the primary
ledger, and no two conflicting certificates for the same (sender,
sequence) slot. Conflicting certificates are reported together with the
intersection of their signing quorums, which always names at least f+1
authorities, i.e. at least one misbehaving signer beyond the tolerated
fault budget.

An empty findings list means the corpus is consistent. Dumps that fail
to parse are reported as findings, not raised, so one corrupt file does
not mask problems elsewhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from . import crypto
from .authority import AccountOffchainState, parse_dump
from .committee import Committee, ShardAssignment
from .core import CertifiedTransfer, verify_certificate, verify_signed_order
from .errors import ProtocolError

# Finding kinds, grouped by scope.
PARSE_ERROR = "parse-error"
UNKNOWN_AUTHORITY = "unknown-authority"
DUPLICATE_DUMP = "duplicate-dump"
INVALID_CERTIFICATE = "invalid-certificate"
INVALID_VOTE = "invalid-vote"
CONFIRMED_GAP = "confirmed-gap"
STALE_PENDING = "stale-pending"
MISPLACED_ACCOUNT = "misplaced-account"
MISPLACED_CREDIT = "misplaced-credit"
BALANCE_MISMATCH = "balance-mismatch"
BALANCE_BOUND = "balance-bound"
FUNDING_MISMATCH = "funding-mismatch"
EQUIVOCATION = "equivocation"
PRIMARY_MALFORMED = "primary-malformed"
SOLVENCY = "solvency"


def _short(raw: bytes) -> str:
    return raw.hex()[:8]


@dataclass(frozen=True, slots=True)
class AuditFinding:
    kind: str
    authority: str  # hex prefix of the authority name, or "-" for global findings
    account: str  # hex prefix of the account address, or "-"
    detail: str

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "authority": self.authority,
            "account": self.account,
            "detail": self.detail,
        }


@dataclass
class AuditReport:
    findings: list[AuditFinding] = field(default_factory=list)
    authorities_audited: int = 0
    shards_audited: int = 0
    accounts_audited: int = 0
    certificates_checked: int = 0

    @property
    def ok(self) -> bool:
        return not self.findings

    def add(self, kind: str, authority: str, account: str, detail: str) -> None:
        self.findings.append(AuditFinding(kind, authority, account, detail))

    def kinds(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for finding in self.findings:
            out[finding.kind] = out.get(finding.kind, 0) + 1
        return out

    def to_dict(self) -> dict:
        return {
            "format": "settlenet-audit-1",
            "ok": self.ok,
            "authorities_audited": self.authorities_audited,
            "shards_audited": self.shards_audited,
            "accounts_audited": self.accounts_audited,
            "certificates_checked": self.certificates_checked,
            "findings": [f.to_dict() for f in self.findings],
        }


def format_report(report: AuditReport) -> str:
    lines = [
        f"audit: {'PASS' if report.ok else 'FAIL'}"
        f" ({report.shards_audited} shard dumps, {report.accounts_audited} accounts,"
        f" {report.certificates_checked} certificates checked)"
    ]
    for finding in report.findings:
        lines.append(
            f"  [{finding.kind}] authority={finding.authority}"
            f" account={finding.account}: {finding.detail}"
        )
    return "\n".join(lines)


class _CertRegistry:
    """Union of every certificate stored anywhere, keyed by (sender, sequence)."""

    def __init__(self):
        self.by_key: dict[tuple[bytes, int], dict[bytes, CertifiedTransfer]] = {}
        # Certified inbound value per settlement recipient address.
        self.credit_to: dict[bytes, int] = {}
        self._credited: set[bytes] = set()

    def observe(self, cert: CertifiedTransfer) -> None:
        digest = cert.order.digest()
        variants = self.by_key.setdefault(cert.key(), {})
        variants[digest] = cert
        if digest not in self._credited:
            self._credited.add(digest)
            recipient = cert.order.recipient
            if not recipient.is_primary:
                addr = recipient.address
                self.credit_to[addr] = self.credit_to.get(addr, 0) + cert.order.amount

    def conflicts(self) -> list[tuple[tuple[bytes, int], list[CertifiedTransfer]]]:
        out = []
        for key in sorted(self.by_key, key=lambda k: (k[0], k[1])):
            variants = self.by_key[key]
            if len(variants) > 1:
                out.append((key, [variants[d] for d in sorted(variants)]))
        return out


def _audit_account(
    report: AuditReport,
    committee: Committee,
    registry: _CertRegistry,
    assignment: ShardAssignment,
    name: bytes,
    shard_id: int,
    address: bytes,
    account: AccountOffchainState,
) -> None:
    who = _short(name)
    acct = _short(address)

    if not assignment.in_shard(shard_id, address):
        report.add(
            MISPLACED_ACCOUNT,
            who,
            acct,
            f"stored in shard {shard_id}, routes to {assignment.which_shard(address)}",
        )

    # Outbound certificates: must verify, belong to this account, and form
    # a gap-free sequence prefix matched by the sequence counter.
    seqs = []
    for cert in account.confirmed:
        report.certificates_checked += 1
        try:
            verify_certificate(committee, cert)
        except ProtocolError as exc:
            report.add(INVALID_CERTIFICATE, who, acct, f"confirmed seq {cert.order.sequence}: {exc}")
            continue
        registry.observe(cert)
        if cert.order.sender != address:
            report.add(
                INVALID_CERTIFICATE,
                who,
                acct,
                f"confirmed log holds a certificate for sender {_short(cert.order.sender)}",
            )
            continue
        seqs.append(cert.order.sequence)

    if seqs != list(range(len(seqs))) or account.next_sequence != len(seqs):
        report.add(
            CONFIRMED_GAP,
            who,
            acct,
            f"confirmed sequences {seqs[:6]}{'...' if len(seqs) > 6 else ''}"
            f" with next_sequence {account.next_sequence}",
        )

    if account.pending is not None:
        try:
            verify_signed_order(committee, account.pending)
            if account.pending.authority != name:
                raise ProtocolError("vote signed by a different authority")
        except ProtocolError as exc:
            report.add(INVALID_VOTE, who, acct, str(exc))
        else:
            if account.pending.order.sequence != account.next_sequence:
                report.add(
                    STALE_PENDING,
                    who,
                    acct,
                    f"pending vote at sequence {account.pending.order.sequence},"
                    f" next_sequence {account.next_sequence}",
                )

    # Inbound certificates: must verify and actually pay this account.
    seen_keys: set[tuple[bytes, int]] = set()
    for cert in account.received:
        report.certificates_checked += 1
        try:
            verify_certificate(committee, cert)
        except ProtocolError as exc:
            report.add(INVALID_CERTIFICATE, who, acct, f"received credit: {exc}")
            continue
        registry.observe(cert)
        recipient = cert.order.recipient
        if recipient.is_primary or recipient.address != address:
            report.add(
                MISPLACED_CREDIT,
                who,
                acct,
                f"credit from {_short(cert.order.sender)} seq {cert.order.sequence}"
                " does not pay this account",
            )
        if cert.key() in seen_keys:
            report.add(
                MISPLACED_CREDIT,
                who,
                acct,
                f"duplicate credit for sender {_short(cert.order.sender)}"
                f" seq {cert.order.sequence}",
            )
        seen_keys.add(cert.key())

    # Funding entries must name this account; uniqueness by index.
    sync_indices: set[int] = set()
    for sync in account.synchronized:
        if sync.recipient != address:
            report.add(
                FUNDING_MISMATCH,
                who,
                acct,
                f"funding index {sync.transaction_index} names {_short(sync.recipient)}",
            )
        if sync.transaction_index in sync_indices:
            report.add(
                FUNDING_MISMATCH, who, acct, f"funding index {sync.transaction_index} recorded twice"
            )
        sync_indices.add(sync.transaction_index)

    # The balance must equal exactly what the recorded history explains.
    explained = (
        sum(s.amount for s in account.synchronized)
        + sum(c.order.amount for c in account.received)
        - sum(c.order.amount for c in account.confirmed)
    )
    if account.balance != explained:
        report.add(
            BALANCE_MISMATCH,
            who,
            acct,
            f"balance {account.balance}, recorded history explains {explained}",
        )


@dataclass(slots=True)
class _ShardDump:
    name: bytes
    shard_id: int
    num_shards: int
    last_transaction: int
    records: list[tuple[bytes, AccountOffchainState]]


def _parse_primary(report: AuditReport, doc: dict) -> Optional[dict]:
    """Validate snapshot structure; return normalized fields or None."""
    try:
        if doc.get("format") != "settlenet-primary-1":
            raise ValueError(f"unexpected format {doc.get('format')!r}")
        funding = [
            (int(row["index"]), bytes.fromhex(row["recipient"]), int(row["amount"]))
            for row in doc["funding"]
        ]
        redeem_logs = {
            bytes.fromhex(sender): sorted(int(s) for s in seqs)
            for sender, seqs in doc["redeem_logs"].items()
        }
        redeemed_to = {bytes.fromhex(addr): int(v) for addr, v in doc["redeemed_to"].items()}
        return {
            "total_balance": int(doc["total_balance"]),
            "last_transaction": int(doc["last_transaction"]),
            "funding": funding,
            "redeem_logs": redeem_logs,
            "redeemed_to": redeemed_to,
        }
    except (KeyError, ValueError, TypeError) as exc:
        report.add(PRIMARY_MALFORMED, "-", "-", f"bad primary snapshot: {exc}")
        return None


def audit(
    committee: Committee,
    dumps: Iterable[tuple[str, bytes]],
    primary: Optional[dict] = None,
) -> AuditReport:
    """Audit a corpus of (label, dump bytes) pairs against an optional
    primary-ledger snapshot. Returns a report whose findings list is empty
    exactly when every check passes."""
    report = AuditReport()
    registry = _CertRegistry()
    parsed: list[_ShardDump] = []
    seen_dumps: set[tuple[bytes, int]] = set()

    for label, raw in dumps:
        try:
            header, records = parse_dump(raw)
        except Exception as exc:  # corrupt input is a finding, not a crash
            report.add(PARSE_ERROR, "-", "-", f"{label}: {exc}")
            continue
        name, shard_id, num_shards, last_transaction = header
        if name not in committee.members:
            report.add(UNKNOWN_AUTHORITY, _short(name), "-", f"{label}: not a committee member")
            continue
        if (name, shard_id) in seen_dumps:
            report.add(DUPLICATE_DUMP, _short(name), "-", f"{label}: shard {shard_id} seen twice")
            continue
        seen_dumps.add((name, shard_id))
        parsed.append(_ShardDump(name, shard_id, num_shards, last_transaction, records))

    report.shards_audited = len(parsed)
    report.authorities_audited = len({d.name for d in parsed})

    primary_fields = _parse_primary(report, primary) if primary is not None else None

    for dump in parsed:
        assignment = ShardAssignment(dump.num_shards)
        for address, account in dump.records:
            report.accounts_audited += 1
            _audit_account(
                report, committee, registry, assignment, dump.name, dump.shard_id, address, account
            )

    # Cross-authority: at most one certificate per (sender, sequence). Two
    # distinct certified orders for one slot need signing quorums whose
    # intersection, at least f+1 authorities, all signed both.
    for (sender, sequence), variants in registry.conflicts():
        for i in range(len(variants)):
            for j in range(i + 1, len(variants)):
                first, second = variants[i], variants[j]
                shared = sorted(
                    _short(a) for a in set(first.signers()) & set(second.signers())
                )
                report.add(
                    EQUIVOCATION,
                    "-",
                    _short(sender),
                    f"sequence {sequence}: orders {first.order.digest().hex()[:8]} and"
                    f" {second.order.digest().hex()[:8]} both certified;"
                    f" {len(shared)} double-signers: {', '.join(shared)}",
                )

    if primary_fields is not None:
        _audit_primary(report, registry, parsed, primary_fields)

    return report


def _audit_primary(
    report: AuditReport,
    registry: _CertRegistry,
    parsed: list[_ShardDump],
    fields: dict,
) -> None:
    funding_by_index = {}
    funded_to: dict[bytes, int] = {}
    for index, recipient, amount in fields["funding"]:
        if index in funding_by_index:
            report.add(SOLVENCY, "-", "-", f"funding index {index} appears twice")
        funding_by_index[index] = (recipient, amount)
        funded_to[recipient] = funded_to.get(recipient, 0) + amount
    funded_total = sum(amount for _, _, amount in fields["funding"])

    expected_indices = list(range(1, fields["last_transaction"] + 1))
    if sorted(funding_by_index) != expected_indices:
        report.add(
            SOLVENCY,
            "-",
            "-",
            f"funding indices not contiguous up to {fields['last_transaction']}",
        )

    # Every locally synchronized funding entry must replay a real one.
    for dump in parsed:
        for address, account in dump.records:
            for sync in account.synchronized:
                expected = funding_by_index.get(sync.transaction_index)
                if expected is None or expected != (sync.recipient, sync.amount):
                    report.add(
                        FUNDING_MISMATCH,
                        _short(dump.name),
                        _short(address),
                        f"funding index {sync.transaction_index} not in the primary ledger",
                    )
        if dump.last_transaction > fields["last_transaction"]:
            report.add(
                FUNDING_MISMATCH,
                _short(dump.name),
                "-",
                f"shard {dump.shard_id} saw funding index {dump.last_transaction},"
                f" primary is at {fields['last_transaction']}",
            )

    # Escrow accounting: funded value either stays escrowed or was paid out.
    redeemed_total = sum(fields["redeemed_to"].values())
    if fields["total_balance"] != funded_total - redeemed_total:
        report.add(
            SOLVENCY,
            "-",
            "-",
            f"escrow balance {fields['total_balance']},"
            f" funding minus redemptions gives {funded_total - redeemed_total}",
        )
    if fields["total_balance"] < 0:
        report.add(SOLVENCY, "-", "-", f"negative escrow balance {fields['total_balance']}")

    # Certified-but-unredeemed primary payouts must fit in the escrow.
    redeem_logs = fields["redeem_logs"]
    outstanding = 0
    for (sender, sequence), variants in registry.by_key.items():
        for cert in variants.values():
            if cert.order.recipient.is_primary and sequence not in redeem_logs.get(sender, ()):
                outstanding += cert.order.amount
    if outstanding > fields["total_balance"]:
        report.add(
            SOLVENCY,
            "-",
            "-",
            f"certified unredeemed payouts total {outstanding},"
            f" escrow holds {fields['total_balance']}",
        )

    # Per-account safety: certified spending never exceeds certified income.
    spent: dict[bytes, int] = {}
    for (sender, _), variants in registry.by_key.items():
        best = max(cert.order.amount for cert in variants.values())
        spent[sender] = spent.get(sender, 0) + best
    for sender, total in sorted(spent.items()):
        backing = funded_to.get(sender, 0) + registry.credit_to.get(sender, 0)
        if total > backing:
            report.add(
                BALANCE_BOUND,
                "-",
                _short(sender),
                f"certified outflow {total} exceeds funding plus credits {backing}",
            )


def load_dump_dir(path: Union[str, Path]) -> list[tuple[str, bytes]]:
    """Read every *.dump file under a directory, sorted by file name."""
    base = Path(path)
    out = []
    for entry in sorted(base.glob("*.dump")):
        out.append((entry.name, entry.read_bytes()))
    return out
