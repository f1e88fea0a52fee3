"""Deterministic fault-injection simulator with an independent trace oracle.

Virtual time is integer microseconds driven by an event heap, so a seeded run
reproduces byte-for-byte.  Authorities run the real shard state machine and
the real inter-shard channel; clients drive the same sans-io conversations
the live transports use, with virtual retransmission timers.  The oracle
replays every recorded delivery through a deliberately minimal second
interpreter and cross-checks the global books, so a bug in the production
handlers cannot certify its own output.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Union

from . import wire
from .authority import AuthorityState
from .client import Conversation, confirmation_conversation, transfer_conversation
from .committee import AuthorityEntry, Committee, CommitteeConfig, ShardAssignment
from .core import (
    AccountInfoResponse,
    CertifiedTransfer,
    ErrorResponse,
    FundingTransaction,
    PrimarySynchronizationOrder,
    Recipient,
    RedeemTransaction,
    SignedTransferOrder,
    TransferOrder,
    aggregate_certificate,
    authority_sign_order,
    sign_transfer_order,
    verify_order_signature,
)
from .crypto import KeyPair, deterministic_keypairs
from .errors import (
    ErrorCode,
    ProtocolError,
    QuorumUnreachable,
    TransportTimeout,
)
from .network import InterShardChannel, dispatch_message
from .primary import PrimaryState


class Behavior(str, Enum):
    """Per-authority fault model for a simulated run."""

    HONEST = "honest"
    CRASHED = "crashed"  # black hole: nothing in, nothing out
    STONEWALL = "stonewall"  # receives, but never processes or replies
    SIGN_ANYTHING = "sign_anything"  # votes for any order, keeps no locks
    EQUIVOCATE = "equivocate"  # signs conflicting orders at one sequence
    REPORT_ZERO_SEQUENCE = "report_zero_sequence"  # lies in account queries
    DELAY_MAX = "delay_max"  # honest, but always at worst-case latency


# Behaviors whose shard state must still match the oracle's replay.
HONEST_STATE = frozenset(
    {Behavior.HONEST, Behavior.DELAY_MAX, Behavior.REPORT_ZERO_SEQUENCE}
)
# Menu the randomized safety runs draw their one misbehaving authority from.
SAFETY_MENU = (
    Behavior.CRASHED,
    Behavior.STONEWALL,
    Behavior.SIGN_ANYTHING,
    Behavior.EQUIVOCATE,
    Behavior.REPORT_ZERO_SEQUENCE,
    Behavior.DELAY_MAX,
)


@dataclass(frozen=True, slots=True)
class NetworkModel:
    """Per-message link model; reordering emerges from randomized delays."""

    min_delay_us: int = 500
    max_delay_us: int = 15_000
    drop_rate: float = 0.02

    def to_dict(self) -> dict:
        return {
            "min_delay_us": self.min_delay_us,
            "max_delay_us": self.max_delay_us,
            "drop_rate": self.drop_rate,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkModel":
        base = cls()
        return cls(
            min_delay_us=int(doc.get("min_delay_us", base.min_delay_us)),
            max_delay_us=int(doc.get("max_delay_us", base.max_delay_us)),
            drop_rate=float(doc.get("drop_rate", base.drop_rate)),
        )


@dataclass(frozen=True)
class SimConfig:
    """Everything that determines a run; equal configs give equal traces."""

    seed: int = 0
    committee_size: int = 4
    shards_per_authority: int = 1
    behaviors: dict[int, Behavior] = field(default_factory=dict)
    network: NetworkModel = field(default_factory=NetworkModel)
    accounts: int = 6
    operations: int = 60
    workload: str = "mixed"  # "mixed" or "settlement_only"
    funding_max: int = 5_000
    genesis_funding: int = 50_000
    retransmit_us: int = 300_000
    max_attempts: int = 12
    think_max_us: int = 5_000
    record_hashes: bool = False
    max_virtual_us: int = 4 * 3_600_000_000

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "committee_size": self.committee_size,
            "shards_per_authority": self.shards_per_authority,
            "behaviors": {str(k): Behavior(v).value for k, v in self.behaviors.items()},
            "network": self.network.to_dict(),
            "accounts": self.accounts,
            "operations": self.operations,
            "workload": self.workload,
            "funding_max": self.funding_max,
            "genesis_funding": self.genesis_funding,
            "retransmit_us": self.retransmit_us,
            "max_attempts": self.max_attempts,
            "think_max_us": self.think_max_us,
            "record_hashes": self.record_hashes,
            "max_virtual_us": self.max_virtual_us,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        base = cls()
        return cls(
            seed=int(doc.get("seed", base.seed)),
            committee_size=int(doc.get("committee_size", base.committee_size)),
            shards_per_authority=int(
                doc.get("shards_per_authority", base.shards_per_authority)
            ),
            behaviors={
                int(k): Behavior(v) for k, v in doc.get("behaviors", {}).items()
            },
            network=NetworkModel.from_dict(doc.get("network", {})),
            accounts=int(doc.get("accounts", base.accounts)),
            operations=int(doc.get("operations", base.operations)),
            workload=str(doc.get("workload", base.workload)),
            funding_max=int(doc.get("funding_max", base.funding_max)),
            genesis_funding=int(doc.get("genesis_funding", base.genesis_funding)),
            retransmit_us=int(doc.get("retransmit_us", base.retransmit_us)),
            max_attempts=int(doc.get("max_attempts", base.max_attempts)),
            think_max_us=int(doc.get("think_max_us", base.think_max_us)),
            record_hashes=bool(doc.get("record_hashes", base.record_hashes)),
            max_virtual_us=int(doc.get("max_virtual_us", base.max_virtual_us)),
        )

    def to_file(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(slots=True)
class TraceEvent:
    index: int
    time_us: int
    kind: str  # deliver | signed | cert | fund | redeem | op-failed | quiescent | end
    actor: str  # "a1/s0", "c3", "primary", "sim"
    tag: int  # wire tag for deliveries, else 0
    payload: object = None
    state_hash: str = ""


@dataclass
class Trace:
    """Everything a run produced, sufficient for offline invariant checking."""

    config: SimConfig
    committee_config: CommitteeConfig
    behaviors: dict[int, Behavior]
    events: list[TraceEvent]
    authorities: dict[tuple[int, int], AuthorityState]
    primary: PrimaryState
    certificates: dict[tuple[bytes, int], CertifiedTransfer]
    client_addresses: list[bytes]
    stats: dict

    def lines(self) -> list[str]:
        cfg = self.config
        out = [
            "# settlenet-trace 1",
            f"# seed {cfg.seed} committee {cfg.committee_size} "
            f"shards {cfg.shards_per_authority} ops {self.stats.get('ops_started', 0)}",
        ]
        for e in self.events:
            label = wire.TAG_NAMES.get(e.tag, e.kind) if e.kind == "deliver" else e.kind
            out.append(f"{e.index} {e.time_us} {e.actor} {label} {e.state_hash or '-'}")
        return out

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


class _Runner:
    """Drives one conversation against one authority with virtual-time
    retransmission; gives up after the configured attempt budget."""

    __slots__ = (
        "sim",
        "auth_index",
        "program",
        "on_result",
        "on_error",
        "done",
        "serial",
        "attempts",
        "waiting",
        "counted",
        "shard",
        "message",
    )

    def __init__(self, sim: "_Simulation", auth_index: int, program: Conversation, on_result, on_error):
        self.sim = sim
        self.auth_index = auth_index
        self.program = program
        self.on_result = on_result
        self.on_error = on_error
        self.done = False
        self.serial = 0
        self.attempts = 0
        self.waiting = False
        # Requests to a black hole are never "in flight" for quiescence.
        self.counted = sim.behaviors[auth_index] not in (
            Behavior.CRASHED,
            Behavior.STONEWALL,
        )
        self.shard = 0
        self.message = None
        self._advance(None, first=True)

    def _set_waiting(self, flag: bool) -> None:
        if flag == self.waiting:
            return
        self.waiting = flag
        if self.counted:
            self.sim.waiting += 1 if flag else -1

    def _finish(self, fn, arg) -> None:
        self.done = True
        self._set_waiting(False)
        fn(arg)

    def _advance(self, value, first: bool = False) -> None:
        try:
            item = next(self.program) if first else self.program.send(value)
        except StopIteration as stop:
            self._finish(self.on_result, stop.value)
            return
        except ProtocolError as exc:
            self._finish(self.on_error, exc)
            return
        self.shard, self.message = item
        self.serial += 1
        self.attempts = 0
        self._set_waiting(True)
        self._transmit()

    def _transmit(self) -> None:
        serial = self.serial
        self.sim.network_request(
            self.auth_index,
            self.shard,
            self.message,
            lambda resp, s=serial: self._on_response(s, resp),
        )
        self.sim.schedule(
            self.sim.config.retransmit_us, lambda s=serial: self._on_timer(s)
        )

    def _on_response(self, serial: int, response) -> None:
        if self.done or serial != self.serial:
            return  # finished, stale, or a duplicate from a retransmission
        self._set_waiting(False)
        self._advance(response)

    def _on_timer(self, serial: int) -> None:
        if self.done or serial != self.serial:
            return
        self.attempts += 1
        if self.attempts >= self.sim.config.max_attempts:
            self._finish(self.on_error, TransportTimeout("no reply from authority"))
            return
        self._transmit()


class _QuorumOp:
    """Event-driven mirror of the threaded quorum driver."""

    def __init__(self, sim: "_Simulation", make_conversation, quorum: int, on_success, on_failure):
        self.quorum = quorum
        self.on_success = on_success
        self.on_failure = on_failure
        self.successes: dict[bytes, object] = {}
        self.failures: dict[bytes, Exception] = {}
        self.total = sim.config.committee_size
        self.finished = False
        for index, name in enumerate(sim.authority_names):
            _Runner(
                sim,
                index,
                make_conversation(name),
                lambda value, n=name: self._done(n, value),
                lambda exc, n=name: self._fail(n, exc),
            )

    def _done(self, name: bytes, value) -> None:
        self.successes[name] = value
        if not self.finished and len(self.successes) >= self.quorum:
            self.finished = True
            self.on_success(dict(self.successes))

    def _fail(self, name: bytes, exc: Exception) -> None:
        self.failures[name] = exc
        if not self.finished and self.total - len(self.failures) < self.quorum:
            self.finished = True
            self.on_failure(
                QuorumUnreachable(f"{len(self.failures)} of {self.total} unreachable")
            )


def _push_sync_program(num_shards: int, sync: PrimarySynchronizationOrder) -> Conversation:
    """Push one funding record to every shard, riding out index gaps caused
    by reordered earlier records whose own pushes are still in flight."""
    for shard in range(num_shards):
        for _ in range(200):
            resp = yield (shard, sync)
            if not (
                isinstance(resp, ErrorResponse)
                and resp.code == ErrorCode.SYNC_ORDER_GAP
            ):
                break
    return None


class _AuthorityActor:
    """One shard of one simulated authority, with its fault behavior."""

    def __init__(
        self,
        sim: "_Simulation",
        index: int,
        state: AuthorityState,
        behavior: Behavior,
        channel_key: bytes,
    ):
        self.sim = sim
        self.index = index
        self.state = state
        self.behavior = behavior
        self.channel = InterShardChannel(channel_key, state.shard_id)
        self.label = f"a{index}/s{state.shard_id}"
        self.pump_scheduled = False

    def on_request(self, message, reply: Callable) -> None:
        tag = wire.tag_of(message)
        if self.behavior is Behavior.STONEWALL:
            self.sim.stats["stonewalled"] += 1
            return
        event = self.sim.record("deliver", self.label, tag, message)
        response = self._dispatch(tag, message)
        if self.sim.config.record_hashes:
            event.state_hash = self.state.state_hash().hex()[:16]
        if (
            tag == wire.TAG_TRANSFER_ORDER
            and isinstance(response, SignedTransferOrder)
            and self.behavior in HONEST_STATE
        ):
            self.sim.record(
                "signed",
                self.label,
                0,
                (message.sender, message.sequence, message.amount, message.digest()),
            )
        if response is not None:
            reply(response)

    def _dispatch(self, tag: int, message):
        if tag == wire.TAG_TRANSFER_ORDER:
            if self.behavior is Behavior.SIGN_ANYTHING:
                return authority_sign_order(self.state.keypair, message)
            if self.behavior is Behavior.EQUIVOCATE:
                try:
                    verify_order_signature(message)
                except ProtocolError as exc:
                    return ErrorResponse(code=int(exc.code), detail=str(exc))
                return authority_sign_order(self.state.keypair, message)
        response = dispatch_message(self.state, tag, message, self._forward_update)
        if self.behavior is Behavior.REPORT_ZERO_SEQUENCE and isinstance(
            response, AccountInfoResponse
        ):
            # Claims the account never moved; clients must repair through it.
            response = AccountInfoResponse(
                address=response.address,
                balance=response.balance,
                next_sequence=0,
            )
        return response

    # -- Inter-shard channel over the simulated network --------------------

    def _forward_update(self, update) -> None:
        frame = self.channel.send(update.shard_id, wire.encode_message(update))
        self.sim.channel_cast(self.index, update.shard_id, frame)
        self._ensure_pump()

    def _ensure_pump(self) -> None:
        if not self.pump_scheduled:
            self.pump_scheduled = True
            self.sim.schedule(self.sim.config.retransmit_us, self._pump)

    def _pump(self) -> None:
        self.pump_scheduled = False
        if self.channel.idle():
            return
        for dest, frame in self.channel.frames_due():
            self.sim.channel_cast(self.index, dest, frame)
        self._ensure_pump()

    def on_channel_frame(self, data: bytes) -> None:
        tag, _, message = wire.decode_message(data)
        if tag == wire.TAG_INTER_SHARD:
            payloads, ack = self.channel.on_envelope(message)
            for payload in payloads:
                inner_tag, _, inner = wire.decode_message(payload)
                event = self.sim.record("deliver", self.label, inner_tag, inner)
                dispatch_message(
                    self.state, inner_tag, inner, self._forward_update, internal=True
                )
                if self.sim.config.record_hashes:
                    event.state_hash = self.state.state_hash().hex()[:16]
            if ack is not None:
                self.sim.channel_cast(self.index, message.source_shard, ack)
        elif tag == wire.TAG_INTER_SHARD_ACK:
            self.channel.on_ack(message)


class _SimClient:
    """Honest wallet driving randomized operations through the protocol."""

    def __init__(self, sim: "_Simulation", index: int, keypair: KeyPair):
        self.sim = sim
        self.index = index
        self.keypair = keypair
        self.address = keypair.address
        self.label = f"c{index}"
        self.next_sequence = 0
        self.pending_order: Optional[TransferOrder] = None
        self.pending_redeem = False
        self.known_certs: dict[int, CertifiedTransfer] = {}
        self.received: dict[tuple[bytes, int], CertifiedTransfer] = {}

    def spendable(self) -> int:
        funded = self.sim.funded_by_addr.get(self.address, 0)
        incoming = sum(c.order.amount for c in self.received.values())
        outgoing = sum(c.order.amount for c in self.known_certs.values())
        pending = self.pending_order.amount if self.pending_order is not None else 0
        return max(0, funded + incoming - outgoing - pending)

    def maybe_start(self) -> None:
        sim = self.sim
        if sim.ops_started >= sim.config.operations:
            return
        sim.ops_started += 1
        if self.pending_order is not None:
            # A failed attempt left a signed order behind; resume it so the
            # sequence lock is respected rather than bypassed.
            self._run_transfer(self.pending_order, self.pending_redeem)
            return
        rng = sim.rng
        spend = self.spendable()
        mixed = sim.config.workload == "mixed"
        roll = rng.random()
        if spend == 0 or (mixed and roll < 0.15):
            sim.fund(self.address, rng.randint(100, sim.config.funding_max))
            self._op_done()
            return
        if mixed and roll < 0.30:
            # Pay out to the primary ledger, then redeem on settlement.
            amount = rng.randint(1, spend)
            order = self._sign(Recipient.primary(self.address), amount, rng)
            self._run_transfer(order, redeem=True)
            return
        amount = spend if roll > 0.92 else rng.randint(1, spend)
        recipient = rng.choice(sim.client_addresses)
        order = self._sign(Recipient.settlement(recipient), amount, rng)
        self._run_transfer(order, redeem=False)

    def _sign(self, recipient: Recipient, amount: int, rng: random.Random) -> TransferOrder:
        user_data = rng.randbytes(rng.randint(0, 24)) if rng.random() < 0.2 else b""
        order = sign_transfer_order(
            self.keypair, recipient, amount, self.next_sequence, user_data
        )
        self.pending_order = order
        return order

    def _run_transfer(self, order: TransferOrder, redeem: bool) -> None:
        sim = self.sim
        self.pending_redeem = redeem
        incoming = list(self.received.values())

        def make(name: bytes) -> Conversation:
            return transfer_conversation(
                sim.committee,
                sim.shard_assignment,
                name,
                order,
                sim.cert_provider,
                sim.funding_provider,
                incoming_certs=incoming,
            )

        _QuorumOp(
            sim,
            make,
            sim.committee.quorum_threshold(),
            lambda votes: self._certified(order, votes, redeem),
            lambda exc: self._op_failed(exc),
        )

    def _certified(self, order: TransferOrder, votes: dict, redeem: bool) -> None:
        sim = self.sim
        try:
            cert = aggregate_certificate(sim.committee, order, list(votes.values()))
        except ProtocolError as exc:
            self._op_failed(exc)
            return
        sim.record("cert", self.label, 0, cert)
        sim.certificates[cert.key()] = cert
        self.known_certs[order.sequence] = cert
        self.next_sequence = order.sequence + 1
        self.pending_order = None

        def make(name: bytes) -> Conversation:
            return confirmation_conversation(
                sim.shard_assignment, cert, sim.cert_provider, sim.funding_provider
            )

        _QuorumOp(
            sim,
            make,
            sim.committee.quorum_threshold(),
            lambda _responses: self._settled(cert, redeem),
            lambda exc: self._op_failed(exc),
        )

    def _settled(self, cert: CertifiedTransfer, redeem: bool) -> None:
        sim = self.sim
        if redeem:
            try:
                sim.primary.handle_redeem_transaction(RedeemTransaction(certificate=cert))
                accepted = True
            except ProtocolError:
                accepted = False
            sim.record(
                "redeem",
                self.label,
                0,
                (cert.order.sender, cert.order.sequence, cert.order.amount, accepted),
            )
        else:
            peer = sim.clients_by_address.get(cert.order.recipient.address)
            if peer is not None:
                peer.received[cert.key()] = cert  # sender hands the certificate over
        self._op_done()

    def _op_done(self) -> None:
        sim = self.sim
        sim.ops_completed += 1
        sim.schedule(sim.rng.randint(500, sim.config.think_max_us), self.maybe_start)

    def _op_failed(self, exc: Exception) -> None:
        sim = self.sim
        sim.ops_failed += 1
        sim.record("op-failed", self.label, 0, f"{type(exc).__name__}: {exc}")
        sim.schedule(sim.rng.randint(500, sim.config.think_max_us), self.maybe_start)


class _Simulation:
    def __init__(self, config: SimConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        auth_keys = deterministic_keypairs(
            config.committee_size, f"sim-authority-{config.seed}"
        )
        self.authority_names = [kp.public_bytes for kp in auth_keys]
        self.committee = Committee(tuple(self.authority_names))
        self.shard_assignment = ShardAssignment(config.shards_per_authority)
        self.committee_config = CommitteeConfig(
            tuple(
                AuthorityEntry(
                    name=kp.public_bytes,
                    host="sim",
                    base_port=7000 + 64 * i,
                    num_shards=config.shards_per_authority,
                )
                for i, kp in enumerate(auth_keys)
            )
        )
        self.behaviors = {
            i: Behavior(config.behaviors.get(i, Behavior.HONEST))
            for i in range(config.committee_size)
        }
        self.actors: dict[tuple[int, int], _AuthorityActor] = {}
        for i, kp in enumerate(auth_keys):
            channel_key = hashlib.sha256(b"sim-channel:" + kp.public_bytes).digest()
            for shard in range(config.shards_per_authority):
                state = AuthorityState(
                    kp,
                    self.committee,
                    shard_id=shard,
                    num_shards=config.shards_per_authority,
                )
                self.actors[(i, shard)] = _AuthorityActor(
                    self, i, state, self.behaviors[i], channel_key
                )
        self.primary = PrimaryState(self.committee)
        client_keys = deterministic_keypairs(
            config.accounts, f"sim-client-{config.seed}"
        )
        self.clients = [_SimClient(self, i, kp) for i, kp in enumerate(client_keys)]
        self.clients_by_address = {c.address: c for c in self.clients}
        self.client_addresses = [c.address for c in self.clients]
        self.certificates: dict[tuple[bytes, int], CertifiedTransfer] = {}
        self.funded_by_addr: dict[bytes, int] = {}
        self.events: list[TraceEvent] = []
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()
        self.in_flight = 0
        self.waiting = 0
        self.ops_started = 0
        self.ops_completed = 0
        self.ops_failed = 0
        self.stats = {
            "drops": 0,
            "deliveries": 0,
            "stonewalled": 0,
            "lost_to_crashed": 0,
        }

    # -- Providers shared by every client conversation ---------------------

    def cert_provider(self, sender: bytes, sequence: int) -> Optional[CertifiedTransfer]:
        return self.certificates.get((sender, sequence))

    def funding_provider(self):
        return list(self.primary.funding_log)

    # -- Scheduling and the simulated network ------------------------------

    def schedule(self, delay_us: int, fn: Callable) -> None:
        heapq.heappush(self._heap, (self.now + max(0, delay_us), next(self._seq), fn))

    def record(
        self, kind: str, actor: str, tag: int, payload, state_hash: str = ""
    ) -> TraceEvent:
        event = TraceEvent(len(self.events), self.now, kind, actor, tag, payload, state_hash)
        self.events.append(event)
        return event

    def _delay_for(self, behavior: Behavior) -> int:
        model = self.config.network
        if behavior is Behavior.DELAY_MAX:
            return model.max_delay_us
        return self.rng.randint(model.min_delay_us, model.max_delay_us)

    def _dropped(self) -> bool:
        if self.rng.random() < self.config.network.drop_rate:
            self.stats["drops"] += 1
            return True
        return False

    def network_request(self, auth_index: int, shard: int, message, reply_cb: Callable) -> None:
        behavior = self.behaviors[auth_index]
        if behavior is Behavior.CRASHED:
            self.stats["lost_to_crashed"] += 1
            return
        if self._dropped():
            return
        actor = self.actors[(auth_index, shard)]
        self.in_flight += 1

        def deliver():
            self.in_flight -= 1
            self.stats["deliveries"] += 1
            actor.on_request(message, lambda response: self._reply(behavior, reply_cb, response))

        self.schedule(self._delay_for(behavior), deliver)

    def _reply(self, behavior: Behavior, reply_cb: Callable, response) -> None:
        if self._dropped():
            return
        self.in_flight += 1

        def deliver():
            self.in_flight -= 1
            reply_cb(response)

        self.schedule(self._delay_for(behavior), deliver)

    def channel_cast(self, auth_index: int, dest_shard: int, frame: bytes) -> None:
        if self._dropped():
            return
        actor = self.actors[(auth_index, dest_shard)]
        self.in_flight += 1

        def deliver():
            self.in_flight -= 1
            actor.on_channel_frame(frame)

        self.schedule(self._delay_for(self.behaviors[auth_index]), deliver)

    # -- Primary-ledger actions --------------------------------------------

    def fund(self, address: bytes, amount: int) -> None:
        sync = self.primary.handle_funding_transaction(
            FundingTransaction(recipient=address, amount=amount)
        )
        self.funded_by_addr[address] = self.funded_by_addr.get(address, 0) + amount
        self.record("fund", "primary", wire.TAG_PRIMARY_SYNC, sync)
        for index in range(self.config.committee_size):
            _Runner(
                self,
                index,
                _push_sync_program(self.config.shards_per_authority, sync),
                lambda _value: None,
                lambda _exc: None,
            )

    # -- Main loop ---------------------------------------------------------

    def _maybe_quiescent(self) -> None:
        if self.in_flight or self.waiting:
            return
        if any(not actor.channel.idle() for actor in self.actors.values()):
            return
        if self.events and self.events[-1].kind == "quiescent":
            return
        self.record("quiescent", "sim", 0, None)

    def run(self) -> Trace:
        if self.config.workload == "settlement_only":
            for client in self.clients:
                self.fund(client.address, self.config.genesis_funding)
        for client in self.clients:
            self.schedule(self.rng.randint(1_000, self.config.think_max_us), client.maybe_start)
        pops = 0
        while self._heap:
            time_us, _, fn = heapq.heappop(self._heap)
            if time_us > self.config.max_virtual_us:
                raise RuntimeError("virtual time budget exceeded; run is not settling")
            pops += 1
            if pops > 10_000_000:
                raise RuntimeError("event budget exceeded; run is not settling")
            self.now = time_us
            fn()
            self._maybe_quiescent()
        self._maybe_quiescent()
        self.record("end", "sim", 0, None)
        stats = dict(self.stats)
        stats.update(
            ops_started=self.ops_started,
            ops_completed=self.ops_completed,
            ops_failed=self.ops_failed,
            end_time_us=self.now,
            events=len(self.events),
            heap_pops=pops,
        )
        return Trace(
            config=self.config,
            committee_config=self.committee_config,
            behaviors=dict(self.behaviors),
            events=self.events,
            authorities={key: actor.state for key, actor in self.actors.items()},
            primary=self.primary,
            certificates=dict(self.certificates),
            client_addresses=list(self.client_addresses),
            stats=stats,
        )


def run_simulation(config: SimConfig) -> Trace:
    """Execute one seeded virtual-time run; equal seeds give equal traces."""
    return _Simulation(config).run()


# -- Trace oracle ----------------------------------------------------------
# A second, deliberately minimal interpreter replays the recorded deliveries
# and the final states must agree.  It shares no handler code with the
# authority; only message types and the shard-routing rule.


@dataclass(frozen=True, slots=True)
class CheckResult:
    name: str
    ok: bool
    detail: str = ""


CHECK_NAMES = (
    "end_state_match",
    "balance_equation",
    "confirmed_contiguity",
    "conservation_at_quiescence",
    "certificate_uniqueness",
    "certificate_quorum",
    "signing_balance_check",
    "solvency",
    "primary_conservation",
    "funding_bound",
    "account_safety",
    "redeem_once",
    "exactly_once_delivery",
    "operation_liveness",
)


class _ShadowAccount:
    __slots__ = (
        "balance",
        "next_sequence",
        "pending",
        "confirmed",
        "received",
        "received_keys",
        "received_amount",
        "synchronized",
        "sync_credit",
        "confirmed_out",
    )

    def __init__(self):
        self.balance = 0
        self.next_sequence = 0
        self.pending = None  # digest of the locked order
        self.confirmed: list[bytes] = []  # order digests, settlement order
        self.received: list[tuple[bytes, int]] = []
        self.received_keys: set[tuple[bytes, int]] = set()
        self.received_amount = 0
        self.synchronized: list[int] = []
        self.sync_credit = 0
        self.confirmed_out = 0


class _OracleContext:
    def __init__(self, trace: Trace):
        committee = trace.committee_config.committee
        self.quorum = committee.quorum_threshold()
        self.members = committee.members
        # (sender, sequence) -> (order digest, amount, recipient)
        self.registry: dict[tuple[bytes, int], tuple[bytes, int, Recipient]] = {}
        self.cert_in: dict[bytes, int] = {}
        self.cert_out: dict[bytes, int] = {}
        self.funded_by_addr: dict[bytes, int] = {}
        self.funded_total = 0
        self.current_actor = ""
        self.label_to_key = {f"a{i}/s{j}": (i, j) for (i, j) in trace.authorities}

    def observe_cert(self, cert: CertifiedTransfer, findings: dict) -> None:
        signers = {name for name, _sig in cert.signatures}
        if len(signers) < self.quorum or not signers <= self.members:
            findings["certificate_quorum"].append(
                f"certificate {cert.order.sender.hex()[:8]}:{cert.order.sequence} "
                f"carries {len(signers)} valid signers"
            )
            return
        key = cert.key()
        digest = cert.order.digest()
        known = self.registry.get(key)
        if known is None:
            self.registry[key] = (digest, cert.order.amount, cert.order.recipient)
            self.cert_out[cert.order.sender] = (
                self.cert_out.get(cert.order.sender, 0) + cert.order.amount
            )
            if not cert.order.recipient.is_primary:
                addr = cert.order.recipient.address
                self.cert_in[addr] = self.cert_in.get(addr, 0) + cert.order.amount
        elif known[0] != digest:
            findings["certificate_uniqueness"].append(
                f"conflicting certificates for {cert.order.sender.hex()[:8]}"
                f":{cert.order.sequence}"
            )


class _ShadowShard:
    """Minimal independent re-derivation of one shard's transition rules."""

    def __init__(self, num_shards: int, shard_id: int):
        self.num_shards = num_shards
        self.shard_id = shard_id
        self.accounts: dict[bytes, _ShadowAccount] = {}
        self.last_transaction = 0
        self.primary_out = 0

    def _local(self, address: bytes) -> bool:
        return int.from_bytes(address[:8], "big") % self.num_shards == self.shard_id

    def _get(self, address: bytes) -> _ShadowAccount:
        acct = self.accounts.get(address)
        if acct is None:
            acct = _ShadowAccount()
            self.accounts[address] = acct
        return acct

    def _bound_check(self, address: bytes, ctx: _OracleContext, findings: dict) -> None:
        acct = self.accounts[address]
        ceiling = (
            ctx.funded_by_addr.get(address, 0)
            + ctx.cert_in.get(address, 0)
            - acct.confirmed_out
        )
        if acct.balance > ceiling:
            findings["balance_equation"].append(
                f"{ctx.current_actor} account {address.hex()[:8]} balance "
                f"{acct.balance} exceeds certified ceiling {ceiling}"
            )

    def _credit(self, address: bytes, cert: CertifiedTransfer, ctx, findings) -> None:
        acct = self._get(address)
        acct.balance += cert.order.amount
        acct.received.append(cert.key())
        acct.received_keys.add(cert.key())
        acct.received_amount += cert.order.amount
        self._bound_check(address, ctx, findings)

    def apply(self, tag: int, message, ctx: _OracleContext, findings: dict) -> None:
        if tag == wire.TAG_TRANSFER_ORDER:
            order = message
            if not self._local(order.sender):
                return
            acct = self.accounts.get(order.sender)
            if acct is None or acct.pending is not None:
                return
            if order.amount == 0 or order.sequence != acct.next_sequence:
                return
            if order.amount > acct.balance:
                return
            acct.pending = order.digest()
        elif tag == wire.TAG_CONFIRMATION:
            self._apply_confirmation(message, ctx, findings)
        elif tag == wire.TAG_CROSS_SHARD_COMMIT:
            cert = message.certificate
            recipient = cert.order.recipient
            if recipient.is_primary or not self._local(recipient.address):
                return
            acct = self._get(recipient.address)
            if cert.key() in acct.received_keys:
                findings["exactly_once_delivery"].append(
                    f"{ctx.current_actor} saw duplicate cross-shard credit "
                    f"{cert.order.sender.hex()[:8]}:{cert.order.sequence}"
                )
                return
            self._credit(recipient.address, cert, ctx, findings)
        elif tag == wire.TAG_PRIMARY_SYNC:
            sync = message
            if sync.transaction_index <= self.last_transaction:
                return
            if sync.transaction_index != self.last_transaction + 1:
                return
            self.last_transaction += 1
            if self._local(sync.recipient):
                acct = self._get(sync.recipient)
                acct.balance += sync.amount
                acct.sync_credit += sync.amount
                acct.synchronized.append(sync.transaction_index)
                self._bound_check(sync.recipient, ctx, findings)

    def _apply_confirmation(self, cert: CertifiedTransfer, ctx, findings) -> None:
        order = cert.order
        if not self._local(order.sender):
            return
        acct = self._get(order.sender)
        if order.sequence != acct.next_sequence:
            return  # old replay or a gap the real handler refuses too
        acct.balance -= order.amount
        acct.next_sequence += 1
        acct.pending = None
        acct.confirmed.append(order.digest())
        acct.confirmed_out += order.amount
        recipient = order.recipient
        if recipient.is_primary:
            self.primary_out += order.amount
        elif self._local(recipient.address):
            self._credit(recipient.address, cert, ctx, findings)
        # Cross-shard: the commit arrives at the peer shard as its own event.
        self._bound_check(order.sender, ctx, findings)


def _compare_shard(shadow: _ShadowShard, real: AuthorityState) -> str:
    if shadow.last_transaction != real.last_transaction:
        return (
            f"funding index {shadow.last_transaction} vs {real.last_transaction}"
        )
    if set(shadow.accounts) != set(real.accounts):
        diff = set(shadow.accounts) ^ set(real.accounts)
        return "account set differs on " + ",".join(sorted(a.hex()[:8] for a in diff))
    for address, s in shadow.accounts.items():
        r = real.accounts[address]
        short = address.hex()[:8]
        if s.balance != r.balance:
            return f"{short} balance {s.balance} vs {r.balance}"
        if s.next_sequence != r.next_sequence:
            return f"{short} next_sequence {s.next_sequence} vs {r.next_sequence}"
        r_pending = r.pending.order.digest() if r.pending is not None else None
        if s.pending != r_pending:
            return f"{short} pending lock differs"
        if s.confirmed != [c.order.digest() for c in r.confirmed]:
            return f"{short} confirmed log differs"
        if s.received != [c.key() for c in r.received]:
            return f"{short} received log differs"
        if s.synchronized != [y.transaction_index for y in r.synchronized]:
            return f"{short} funding log differs"
    return ""


def check_invariants(trace: Trace) -> dict[str, CheckResult]:
    """Replay the trace through the oracle and evaluate every safety check."""
    findings: dict[str, list[str]] = {name: [] for name in CHECK_NAMES}
    ctx = _OracleContext(trace)
    num_shards = trace.config.shards_per_authority
    shadows = {
        key: _ShadowShard(num_shards, key[1])
        for key in trace.authorities
        if trace.behaviors[key[0]] in HONEST_STATE
    }
    redeemed: set[tuple[bytes, int]] = set()
    redeemed_total = 0

    for event in trace.events:
        if event.kind == "deliver":
            cert = None
            if event.tag == wire.TAG_CONFIRMATION:
                cert = event.payload
            elif event.tag == wire.TAG_CROSS_SHARD_COMMIT:
                cert = event.payload.certificate
            if cert is not None:
                ctx.observe_cert(cert, findings)
            key = ctx.label_to_key.get(event.actor)
            if key is None or key not in shadows:
                continue
            ctx.current_actor = event.actor
            shadows[key].apply(event.tag, event.payload, ctx, findings)
        elif event.kind == "cert":
            ctx.observe_cert(event.payload, findings)
        elif event.kind == "fund":
            sync = event.payload
            ctx.funded_total += sync.amount
            ctx.funded_by_addr[sync.recipient] = (
                ctx.funded_by_addr.get(sync.recipient, 0) + sync.amount
            )
        elif event.kind == "signed":
            key = ctx.label_to_key.get(event.actor)
            if key is None or key not in shadows:
                continue
            sender, _sequence, amount, digest = event.payload
            acct = shadows[key].accounts.get(sender)
            if acct is None or acct.pending != digest:
                findings["signing_balance_check"].append(
                    f"{event.actor} signed an order the oracle would refuse"
                )
            elif amount > acct.balance:
                findings["signing_balance_check"].append(
                    f"{event.actor} signed {amount} with oracle balance {acct.balance}"
                )
        elif event.kind == "redeem":
            sender, sequence, amount, accepted = event.payload
            if not accepted:
                continue
            if (sender, sequence) in redeemed:
                findings["redeem_once"].append(
                    f"{sender.hex()[:8]}:{sequence} redeemed twice"
                )
                continue
            redeemed.add((sender, sequence))
            redeemed_total += amount
            if redeemed_total > ctx.funded_total:
                findings["solvency"].append(
                    f"redeemed {redeemed_total} exceeds funded {ctx.funded_total}"
                )
        elif event.kind == "quiescent":
            by_authority: dict[int, list[_ShadowShard]] = {}
            for (auth, _shard), shadow in shadows.items():
                by_authority.setdefault(auth, []).append(shadow)
            for auth, group in by_authority.items():
                balances = sum(
                    a.balance for s in group for a in s.accounts.values()
                )
                syncs = sum(a.sync_credit for s in group for a in s.accounts.values())
                out = sum(s.primary_out for s in group)
                if balances != syncs - out:
                    findings["conservation_at_quiescence"].append(
                        f"a{auth} at t={event.time_us}: balances {balances} != "
                        f"funding {syncs} - primary outflow {out}"
                    )
                if syncs != ctx.funded_total:
                    # All shards have applied the full funding stream when
                    # quiescent; credits must match the primary's books.
                    findings["conservation_at_quiescence"].append(
                        f"a{auth} at t={event.time_us}: applied funding {syncs} != "
                        f"emitted funding {ctx.funded_total}"
                    )

    # Final-state checks against the production data structures.
    for key, shadow in shadows.items():
        real = trace.authorities[key]
        mismatch = _compare_shard(shadow, real)
        if mismatch:
            findings["end_state_match"].append(f"a{key[0]}/s{key[1]}: {mismatch}")
        for address, acct in real.accounts.items():
            short = f"a{key[0]}/s{key[1]} {address.hex()[:8]}"
            seqs = [c.order.sequence for c in acct.confirmed]
            if seqs != list(range(len(seqs))) or acct.next_sequence != len(seqs):
                findings["confirmed_contiguity"].append(f"{short}: {seqs}")
            debits = sum(c.order.amount for c in acct.confirmed)
            credits = sum(c.order.amount for c in acct.received)
            syncs = sum(s.amount for s in acct.synchronized)
            if acct.balance != syncs + credits - debits:
                findings["balance_equation"].append(
                    f"{short}: balance {acct.balance} != {syncs}+{credits}-{debits}"
                )

    for key, shadow in shadows.items():
        applied = sum(a.sync_credit for a in shadow.accounts.values())
        if applied > ctx.funded_total:
            findings["funding_bound"].append(
                f"a{key[0]}/s{key[1]} applied {applied} > funded {ctx.funded_total}"
            )
        for address, acct in shadow.accounts.items():
            if acct.sync_credit > ctx.funded_by_addr.get(address, 0):
                findings["funding_bound"].append(
                    f"a{key[0]}/s{key[1]} {address.hex()[:8]} credited beyond funding"
                )

    for address in trace.client_addresses:
        net = (
            ctx.funded_by_addr.get(address, 0)
            + ctx.cert_in.get(address, 0)
            - ctx.cert_out.get(address, 0)
        )
        if net < 0:
            findings["account_safety"].append(
                f"account {address.hex()[:8]} certified {-net} beyond its funds"
            )

    primary = trace.primary
    if primary.total_balance != ctx.funded_total - redeemed_total:
        findings["primary_conservation"].append(
            f"primary balance {primary.total_balance} != "
            f"{ctx.funded_total} funded - {redeemed_total} redeemed"
        )
    if primary.funded_total() != ctx.funded_total:
        findings["primary_conservation"].append("funding log does not match trace")
    if primary.redeemed_total() != redeemed_total:
        findings["primary_conservation"].append("redeem log does not match trace")

    stats = trace.stats
    if stats.get("ops_failed", 0) or stats.get("ops_completed") != stats.get("ops_started"):
        findings["operation_liveness"].append(
            f"{stats.get('ops_failed', 0)} failed, "
            f"{stats.get('ops_completed')}/{stats.get('ops_started')} completed"
        )

    return {
        name: CheckResult(name, not found, "; ".join(found[:3]))
        for name, found in findings.items()
    }


def all_checks_pass(results: dict[str, CheckResult]) -> bool:
    return all(result.ok for result in results.values())


# -- Client equivocation, enumerated exhaustively --------------------------


@dataclass(frozen=True, slots=True)
class EquivocationOutcome:
    """One arrival pattern of two conflicting orders across the committee."""

    arrival_choice: tuple[int, ...]  # per honest authority: 0 or 1 = seen first
    byzantine_double_signer: bool
    votes_first: int
    votes_second: int
    certified_first: bool
    certified_second: bool
    locked: bool  # neither order reached a quorum
    locks_held: bool  # every honest authority refused the second order
    revotes_stable: bool  # re-submitting the first order returned the same vote


def equivocation_scenario(
    committee_size: int = 4, byzantine_double_signer: bool = False
) -> list[EquivocationOutcome]:
    """Exhaustively enumerate a client signing two conflicting orders.

    Every honest authority sees one of the two orders first and must lock on
    it; an optional rogue authority votes for both.  Callers assert that no
    pattern certifies both orders and that an even split certifies neither.
    """
    auth_keys = deterministic_keypairs(committee_size, "equivocation-authority")
    committee = Committee(tuple(kp.public_bytes for kp in auth_keys))
    sender = KeyPair(hashlib.sha256(b"equivocation-sender").digest())
    targets = deterministic_keypairs(2, "equivocation-recipient")
    funding = PrimarySynchronizationOrder(
        transaction_index=1, recipient=sender.address, amount=100
    )
    order_first = sign_transfer_order(
        sender, Recipient.settlement(targets[0].address), 60, 0
    )
    order_second = sign_transfer_order(
        sender, Recipient.settlement(targets[1].address), 60, 0
    )
    honest = auth_keys[:-1] if byzantine_double_signer else auth_keys
    outcomes = []
    for arrival in itertools.product((0, 1), repeat=len(honest)):
        votes: dict[int, list[SignedTransferOrder]] = {0: [], 1: []}
        locks_held = True
        revotes_stable = True
        for kp, first in zip(honest, arrival):
            state = AuthorityState(kp, committee)
            state.handle_primary_synchronization_order(funding)
            head, tail = (
                (order_first, order_second) if first == 0 else (order_second, order_first)
            )
            vote = state.handle_transfer_order(head)
            votes[first].append(vote)
            try:
                state.handle_transfer_order(tail)
            except ProtocolError:
                pass
            else:
                locks_held = False
            if state.handle_transfer_order(head) != vote:
                revotes_stable = False
        if byzantine_double_signer:
            rogue = auth_keys[-1]
            votes[0].append(authority_sign_order(rogue, order_first))
            votes[1].append(authority_sign_order(rogue, order_second))
        certified = {}
        for side, order in ((0, order_first), (1, order_second)):
            try:
                aggregate_certificate(committee, order, votes[side])
                certified[side] = True
            except ProtocolError:
                certified[side] = False
        outcomes.append(
            EquivocationOutcome(
                arrival_choice=arrival,
                byzantine_double_signer=byzantine_double_signer,
                votes_first=len(votes[0]),
                votes_second=len(votes[1]),
                certified_first=certified[0],
                certified_second=certified[1],
                locked=not certified[0] and not certified[1],
                locks_held=locks_held,
                revotes_stable=revotes_stable,
            )
        )
    return outcomes
