"""Correct-user wallet: one signed order per sequence number, quorum
driving, and repair of lagging authorities.

The protocol logic is written as transport-free generator "conversations"
(one per authority): a conversation yields (shard, request) pairs and is
sent the response each time. The same conversations run over real UDP
(threaded runner below), over an in-process deployment, and inside the
virtual-time simulator, so there is exactly one implementation of the
tricky parts (repair against lying authorities, idempotent replays).

A conversation that raises means that authority failed for this
operation; the quorum tracker decides overall success.
"""

from __future__ import annotations

import base64
import json
import os
import queue
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Generator, Iterable, Optional, Union

from . import wire
from .committee import Committee, CommitteeConfig, ShardAssignment
from .core import (
    AccountInfoRequest,
    AccountInfoResponse,
    CertifiedTransfer,
    ErrorResponse,
    PrimarySynchronizationOrder,
    Recipient,
    RedeemTransaction,
    SignedTransferOrder,
    TransferOrder,
    aggregate_certificate,
    sign_transfer_order,
    verify_certificate,
    verify_signed_order,
)
from .crypto import KeyPair
from .errors import (
    ErrorCode,
    InsufficientFunds,
    InvalidAmount,
    MalformedMessage,
    PreviousTransferPending,
    ProtocolError,
    QuorumUnreachable,
    TransportTimeout,
    Unrepairable,
    error_for_code,
)

# (shard, request) out, response message in, result out via StopIteration.
Conversation = Generator[tuple[int, object], object, object]
# (sender, sequence) -> certificate, from local store or other authorities.
CertProvider = Callable[[bytes, int], Optional[CertifiedTransfer]]
FundingProvider = Callable[[], Iterable[PrimarySynchronizationOrder]]

# Server errors a repair run can cure.
_REPAIRABLE = {
    ErrorCode.UNEXPECTED_SEQUENCE,
    ErrorCode.UNKNOWN_SENDER_ACCOUNT,
    ErrorCode.INSUFFICIENT_FUNDS,
    ErrorCode.MISSING_EARLIER_CONFIRMATIONS,
}
# Codes that suggest the authority lacks funding credits, not certificates.
_NEEDS_FUNDING = {
    ErrorCode.UNKNOWN_SENDER_ACCOUNT,
    ErrorCode.INSUFFICIENT_FUNDS,
    ErrorCode.SYNC_ORDER_GAP,
}


def settle_chain_conversation(
    shards: ShardAssignment,
    cert: CertifiedTransfer,
    cert_provider: CertProvider,
) -> Conversation:
    """Best-effort settlement of `cert` plus whatever earlier certificates of
    the same sender this authority still lacks.  Used to surface incoming
    credits; gaps we cannot fill are skipped rather than fatal.
    """
    sender = cert.order.sender
    home = shards.which_shard(sender)
    resp = yield (home, AccountInfoRequest(address=sender))
    if isinstance(resp, AccountInfoResponse) and resp.address == sender:
        start = resp.next_sequence
    elif isinstance(resp, ErrorResponse) and resp.code == ErrorCode.UNKNOWN_ACCOUNT:
        start = 0
    else:
        return None
    for sequence in range(start, cert.order.sequence):
        earlier = cert_provider(sender, sequence)
        if earlier is None:
            return None
        yield (home, earlier)
    yield (home, cert)
    return None


def repair_conversation(
    shards: ShardAssignment,
    sender: bytes,
    target_sequence: int,
    cert_provider: CertProvider,
    funding_provider: FundingProvider,
    push_funding: bool,
    incoming_certs: Iterable[CertifiedTransfer] = (),
) -> Conversation:
    """Bring one authority's view of `sender` up to `target_sequence`.

    Pushes known funding first (when asked), settles certificates that pay
    this account (their credits may be what the balance check is missing),
    reads the authority's claimed next sequence, collects the missing
    certificates in reverse order (a lying authority may claim 0 to make us
    do maximal work; replays are no-ops so correctness is unaffected), then
    submits them ascending.
    """
    home = shards.which_shard(sender)
    if push_funding:
        for sync in funding_provider():
            yield (home, sync)  # replies are account snapshots; nothing to check
    for incoming in sorted(incoming_certs, key=lambda c: (c.order.sender, c.order.sequence)):
        yield from settle_chain_conversation(shards, incoming, cert_provider)
    resp = yield (home, AccountInfoRequest(address=sender))
    if isinstance(resp, AccountInfoResponse) and resp.address == sender:
        start = resp.next_sequence
    elif isinstance(resp, ErrorResponse) and resp.code == ErrorCode.UNKNOWN_ACCOUNT:
        start = 0
    else:
        raise MalformedMessage(f"bad account-info reply: {type(resp).__name__}")
    if start >= target_sequence:
        return None
    missing: list[CertifiedTransfer] = []
    for sequence in range(target_sequence - 1, start - 1, -1):
        cert = cert_provider(sender, sequence)
        if cert is None:
            raise Unrepairable(f"no certificate for sequence {sequence}")
        missing.append(cert)
    for cert in reversed(missing):
        yield (home, cert)  # replay; the final retry of the caller decides
    return None


def transfer_conversation(
    committee: Committee,
    shards: ShardAssignment,
    authority: bytes,
    order: TransferOrder,
    cert_provider: CertProvider,
    funding_provider: FundingProvider,
    max_repairs: int = 3,
    incoming_certs: Iterable[CertifiedTransfer] = (),
) -> Conversation:
    """Obtain this authority's vote on `order`, repairing it if it lags."""
    home = shards.which_shard(order.sender)
    repairs = 0
    while True:
        resp = yield (home, order)
        if isinstance(resp, SignedTransferOrder):
            if resp.authority != authority or resp.order != order:
                raise MalformedMessage("vote does not match the submitted order")
            verify_signed_order(committee, resp)
            return resp
        if isinstance(resp, ErrorResponse):
            if resp.code in _REPAIRABLE and repairs < max_repairs:
                repairs += 1
                yield from repair_conversation(
                    shards,
                    order.sender,
                    order.sequence,
                    cert_provider,
                    funding_provider,
                    push_funding=resp.code in _NEEDS_FUNDING,
                    incoming_certs=incoming_certs if resp.code in _NEEDS_FUNDING else (),
                )
                continue
            raise error_for_code(resp.code, resp.detail)
        raise MalformedMessage(f"unexpected reply {type(resp).__name__}")


def confirmation_conversation(
    shards: ShardAssignment,
    cert: CertifiedTransfer,
    cert_provider: CertProvider,
    funding_provider: FundingProvider,
    max_repairs: int = 3,
) -> Conversation:
    """Settle `cert` at one authority, filling earlier gaps on demand."""
    sender = cert.order.sender
    home = shards.which_shard(sender)
    repairs = 0
    while True:
        resp = yield (home, cert)
        if isinstance(resp, AccountInfoResponse) and resp.address == sender:
            if resp.next_sequence > cert.order.sequence:
                return resp
            raise MalformedMessage("authority acknowledged without settling")
        if isinstance(resp, ErrorResponse):
            if resp.code == ErrorCode.MISSING_EARLIER_CONFIRMATIONS and repairs < max_repairs:
                repairs += 1
                yield from repair_conversation(
                    shards, sender, cert.order.sequence, cert_provider, funding_provider, False
                )
                continue
            raise error_for_code(resp.code, resp.detail)
        raise MalformedMessage(f"unexpected reply {type(resp).__name__}")


def account_info_conversation(shards: ShardAssignment, request: AccountInfoRequest) -> Conversation:
    resp = yield (shards.which_shard(request.address), request)
    if isinstance(resp, ErrorResponse):
        raise error_for_code(resp.code, resp.detail)
    if not isinstance(resp, AccountInfoResponse) or resp.address != request.address:
        raise MalformedMessage("bad account-info reply")
    return resp


def push_sync_conversation(
    shards: ShardAssignment, orders: Iterable[PrimarySynchronizationOrder]
) -> Conversation:
    """Forward observed funding to every shard of one authority, in order."""
    for shard in range(shards.num_shards):
        for sync in list(orders):
            yield (shard, sync)
    return None


def run_conversation(program: Conversation, transport_fn: Callable[[int, object], object]):
    """Drive one conversation over a blocking per-authority transport."""
    try:
        item = next(program)
        while True:
            shard, message = item
            item = program.send(transport_fn(shard, message))
    except StopIteration as stop:
        return stop.value


class AuthorityWorkerPool:
    """One long-lived worker thread (and task queue) per authority.

    A dead or stonewalling authority only backs up its own queue; when the
    queue is full, new tasks fail fast instead of blocking the operation,
    which is exactly the behavior quorum driving wants.
    """

    def __init__(self, names: Iterable[bytes], queue_cap: int = 32):
        self._queues: dict[bytes, queue.Queue] = {}
        self._threads: list[threading.Thread] = []
        self._closed = False
        for name in names:
            q: queue.Queue = queue.Queue(maxsize=queue_cap)
            self._queues[name] = q
            t = threading.Thread(target=self._worker, args=(q,), daemon=True)
            t.start()
            self._threads.append(t)

    def _worker(self, q: queue.Queue) -> None:
        while True:
            task = q.get()
            if task is None:
                return
            future, fn = task
            if not future.set_running_or_notify_cancel():
                continue
            try:
                future.set_result(fn())
            except BaseException as exc:  # noqa: BLE001 - surfaced via the future
                future.set_exception(exc)

    def submit(self, name: bytes, fn: Callable) -> Future:
        future: Future = Future()
        if self._closed:
            future.set_exception(TransportTimeout("pool closed"))
            return future
        try:
            self._queues[name].put_nowait((future, fn))
        except queue.Full:
            future.set_exception(TransportTimeout("authority worker backlog"))
        return future

    def drain(self, timeout: float = 30.0) -> bool:
        """Block until every queued task has finished (quiescence barrier)."""
        barriers = [self.submit(name, lambda: None) for name in self._queues]
        deadline = time.monotonic() + timeout
        for future in barriers:
            remaining = max(0.0, deadline - time.monotonic())
            try:
                future.result(timeout=remaining)
            except ProtocolError:
                pass  # backlogged worker; its queue is full but still live
            except TimeoutError:
                return False
        return True

    def close(self) -> None:
        self._closed = True
        for q in self._queues.values():
            q.put(None)


@dataclass
class QuorumOutcome:
    successes: dict[bytes, object] = field(default_factory=dict)
    failures: dict[bytes, Exception] = field(default_factory=dict)


def run_quorum(
    config: CommitteeConfig,
    pool: AuthorityWorkerPool,
    make_conversation: Callable[[bytes], Conversation],
    transport_for: Callable[[bytes], Callable[[int, object], object]],
    quorum: int,
    wait_all: bool = False,
) -> QuorumOutcome:
    """Run one conversation per authority; return once `quorum` succeed.

    Remaining conversations keep running on their workers and are ignored;
    their server-side effects are idempotent. Raises QuorumUnreachable if
    enough authorities fail that success is impossible.
    """
    committee = config.committee
    names = committee.authorities
    outcome = QuorumOutcome()
    done_queue: queue.Queue = queue.Queue()

    def launch(name: bytes) -> None:
        fn = transport_for(name)
        future = pool.submit(name, lambda: run_conversation(make_conversation(name), fn))
        future.add_done_callback(lambda f, n=name: done_queue.put((n, f)))

    for name in names:
        launch(name)
    pending = len(names)
    while pending:
        name, future = done_queue.get()
        pending -= 1
        exc = future.exception()
        if exc is None:
            outcome.successes[name] = future.result()
            if len(outcome.successes) >= quorum and not wait_all:
                return outcome
        else:
            outcome.failures[name] = exc
            if len(names) - len(outcome.failures) < quorum:
                raise QuorumUnreachable(
                    f"{len(outcome.failures)} of {len(names)} authorities failed: "
                    + "; ".join(type(e).__name__ for e in outcome.failures.values())
                )
    if len(outcome.successes) < quorum:
        raise QuorumUnreachable(f"only {len(outcome.successes)} authorities succeeded")
    return outcome


@dataclass
class ClientState:
    """Minimal persistent wallet state; everything else is recomputable."""

    keypair: KeyPair
    next_sequence: int = 0
    pending_order: Optional[TransferOrder] = None
    # Own outgoing certificates by sequence number.
    known_certificates: dict[int, CertifiedTransfer] = field(default_factory=dict)
    # Incoming certificates by (sender, sequence).
    received_certificates: dict[tuple[bytes, int], CertifiedTransfer] = field(default_factory=dict)
    # Funding observed on the primary ledger, ascending contiguous indices.
    sync_orders: list[PrimarySynchronizationOrder] = field(default_factory=list)

    @property
    def address(self) -> bytes:
        return self.keypair.address

    def known_primary_funding(self) -> dict[bytes, int]:
        totals: dict[bytes, int] = {}
        for sync in self.sync_orders:
            totals[sync.recipient] = totals.get(sync.recipient, 0) + sync.amount
        return totals

    def spendable_balance(self) -> int:
        funded = self.known_primary_funding().get(self.address, 0)
        incoming = sum(c.order.amount for c in self.received_certificates.values())
        outgoing = sum(
            c.order.amount for s, c in self.known_certificates.items() if s < self.next_sequence
        )
        pending = self.pending_order.amount if self.pending_order is not None else 0
        return max(0, funded + incoming - outgoing - pending)

    # -- Persistence (atomic text snapshot) --------------------------------

    def to_snapshot(self) -> dict:
        b64 = lambda raw: base64.b64encode(raw).decode()
        frame = lambda msg: b64(wire.encode_message(msg))
        return {
            "format": "settlenet-client-1",
            "secret": self.keypair.secret_bytes.hex(),
            "next_sequence": self.next_sequence,
            "pending_order": None if self.pending_order is None else frame(self.pending_order),
            "known_certificates": {
                str(seq): frame(cert) for seq, cert in sorted(self.known_certificates.items())
            },
            "received_certificates": [frame(c) for c in self.received_certificates.values()],
            "sync_orders": [frame(s) for s in self.sync_orders],
        }

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_snapshot(), indent=2) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ClientState":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "settlenet-client-1":
            raise MalformedMessage("not a client snapshot")
        unframe = lambda text: wire.decode_message(base64.b64decode(text))[2]
        state = cls(keypair=KeyPair(bytes.fromhex(doc["secret"])))
        state.next_sequence = int(doc["next_sequence"])
        if doc["pending_order"] is not None:
            state.pending_order = unframe(doc["pending_order"])
        state.known_certificates = {
            int(seq): unframe(text) for seq, text in doc["known_certificates"].items()
        }
        for text in doc["received_certificates"]:
            cert = unframe(text)
            state.received_certificates[cert.key()] = cert
        state.sync_orders = [unframe(text) for text in doc["sync_orders"]]
        return state


class Client:
    """Drives one account against a deployment over a blocking transport."""

    def __init__(
        self,
        state: ClientState,
        config: CommitteeConfig,
        transport,
        state_path: Optional[Union[str, Path]] = None,
        request_timeout: float = 3.0,
        retry_interval: float = 0.1,
        pool: Optional[AuthorityWorkerPool] = None,
    ):
        self.state = state
        self.config = config
        self.committee = config.committee
        self.transport = transport
        self.state_path = Path(state_path) if state_path else None
        self.request_timeout = request_timeout
        self.retry_interval = retry_interval
        self.pool = pool or AuthorityWorkerPool(self.committee.authorities)
        self._owns_pool = pool is None

    def close(self) -> None:
        if self._owns_pool:
            self.pool.close()

    def _persist(self) -> None:
        if self.state_path is not None:
            self.state.save(self.state_path)

    def _transport_for(self, name: bytes) -> Callable[[int, object], object]:
        entry = self.config.entry(name)

        def fn(shard: int, message):
            return self.transport.request(
                entry.shard_endpoint(shard),
                message,
                timeout=self.request_timeout,
                retry_interval=self.retry_interval,
            )

        return fn

    def _cert_provider(self) -> CertProvider:
        def provider(sender: bytes, sequence: int) -> Optional[CertifiedTransfer]:
            if sender == self.state.address:
                cert = self.state.known_certificates.get(sequence)
                if cert is not None:
                    return cert
            cert = self.state.received_certificates.get((sender, sequence))
            if cert is not None:
                return cert
            return self.fetch_certificate(sender, sequence)

        return provider

    def _funding_provider(self) -> FundingProvider:
        return lambda: list(self.state.sync_orders)

    # -- Public operations -------------------------------------------------

    def spendable_balance(self) -> int:
        return self.state.spendable_balance()

    def initiate_transfer(
        self, recipient: Recipient, amount: int, user_data: bytes = b""
    ) -> CertifiedTransfer:
        state = self.state
        if state.pending_order is not None:
            order = state.pending_order
            if (order.recipient, order.amount, order.user_data) != (recipient, amount, user_data):
                raise PreviousTransferPending(
                    "a different order is pending; resume or abandon it first"
                )
        else:
            if amount == 0:
                raise InvalidAmount("amount must be positive")
            if amount > state.spendable_balance():
                raise InsufficientFunds(
                    f"amount {amount} exceeds spendable {state.spendable_balance()}"
                )
            order = sign_transfer_order(
                state.keypair, recipient, amount, state.next_sequence, user_data
            )
            state.pending_order = order
            self._persist()
        cert = self._certify(order)
        state.known_certificates[order.sequence] = cert
        state.next_sequence = order.sequence + 1
        state.pending_order = None
        self._persist()
        self.confirm_certificate(cert)
        return cert

    def _certify(self, order: TransferOrder) -> CertifiedTransfer:
        provider = self._cert_provider()
        funding = self._funding_provider()

        incoming = list(self.state.received_certificates.values())

        def make(name: bytes) -> Conversation:
            return transfer_conversation(
                self.committee,
                self.config.shard_assignment(name),
                name,
                order,
                provider,
                funding,
                incoming_certs=incoming,
            )

        outcome = run_quorum(
            self.config,
            self.pool,
            make,
            self._transport_for,
            self.committee.quorum_threshold(),
        )
        return aggregate_certificate(self.committee, order, list(outcome.successes.values()))

    def confirm_certificate(
        self, cert: CertifiedTransfer, wait_all: bool = False
    ) -> dict[bytes, AccountInfoResponse]:
        """Settle a certificate at a quorum; callable by anyone holding it."""
        verify_certificate(self.committee, cert)
        provider = self._cert_provider()
        funding = self._funding_provider()

        def make(name: bytes) -> Conversation:
            return confirmation_conversation(
                self.config.shard_assignment(name), cert, provider, funding
            )

        outcome = run_quorum(
            self.config,
            self.pool,
            make,
            self._transport_for,
            self.committee.quorum_threshold(),
            wait_all=wait_all,
        )
        return outcome.successes

    def repair_authority(
        self, name: bytes, sender: bytes, target_sequence: int, push_funding: bool = True
    ) -> None:
        """Replay funding and certificates so `name` catches up on `sender`."""
        incoming = list(self.state.received_certificates.values()) if sender == self.state.address else ()
        program = repair_conversation(
            self.config.shard_assignment(name),
            sender,
            target_sequence,
            self._cert_provider(),
            self._funding_provider(),
            push_funding,
            incoming_certs=incoming,
        )
        run_conversation(program, self._transport_for(name))

    def query_account(self, name: bytes, request: AccountInfoRequest) -> AccountInfoResponse:
        program = account_info_conversation(self.config.shard_assignment(name), request)
        return run_conversation(program, self._transport_for(name))

    def fetch_certificate(self, sender: bytes, sequence: int) -> Optional[CertifiedTransfer]:
        """Locate one certificate from any authority's confirmed log."""
        request = AccountInfoRequest(address=sender, confirmed_start=sequence, confirmed_count=1)
        for name in self.committee.authorities:
            try:
                resp = self.query_account(name, request)
            except ProtocolError:
                continue
            if resp.confirmed:
                cert = resp.confirmed[0]
                if cert.order.sender == sender and cert.order.sequence == sequence:
                    try:
                        verify_certificate(self.committee, cert)
                    except ProtocolError:
                        continue
                    return cert
        return None

    def receive_certificate(self, cert: CertifiedTransfer) -> None:
        """Accept an incoming payment certificate shown by its sender."""
        verify_certificate(self.committee, cert)
        if cert.order.recipient != Recipient.settlement(self.state.address):
            raise MalformedMessage("certificate does not pay this account")
        self.state.received_certificates[cert.key()] = cert
        self._persist()

    def receive_from_primary(
        self, sync_orders: Iterable[PrimarySynchronizationOrder], push: bool = False
    ) -> None:
        """Record funding observed on the primary ledger; optionally forward it."""
        known = {s.transaction_index for s in self.state.sync_orders}
        for sync in sync_orders:
            if sync.transaction_index not in known:
                self.state.sync_orders.append(sync)
                known.add(sync.transaction_index)
        self.state.sync_orders.sort(key=lambda s: s.transaction_index)
        self._persist()
        if push:
            self.push_funding_to_authorities()

    def push_funding_to_authorities(self) -> None:
        """Forward observed funding to every shard of every authority."""
        orders = list(self.state.sync_orders)
        for name in self.committee.authorities:
            program = push_sync_conversation(self.config.shard_assignment(name), orders)
            try:
                run_conversation(program, self._transport_for(name))
            except ProtocolError:
                continue  # best effort; a quorum elsewhere suffices

    def redeem_to_primary(self, cert: CertifiedTransfer, primary) -> None:
        """Spend a primary-recipient certificate on the (trusted) primary ledger."""
        primary.handle_redeem_transaction(RedeemTransaction(certificate=cert))
