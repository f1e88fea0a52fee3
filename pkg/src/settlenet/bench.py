"""Throughput and latency measurement over real loopback sockets.

Two kinds of measurement live here:

* A microbenchmark timing the six message operations that dominate the
  protocol: creating and checking transfer orders, votes, and
  certificates, each measured over hundreds of distinct inputs with the
  verification cache cleared first, so every check pays full price.

* Load phases driving pre-generated traffic at a bounded number of
  in-flight requests through a single non-blocking UDP socket:

  - "transfer-orders": signed orders against one authority, measuring
    vote throughput;
  - "confirmations": pre-certified transfers against one authority,
    measuring settlement throughput;
  - "end-to-end": full transfers (votes from a quorum or from everyone,
    then confirmations) against the whole committee.

  All request generation and signing happens before the clock starts.
  An optional emulated round-trip delay stretches every request so the
  effect of the in-flight budget on a long pipe is observable on
  loopback.

After a local run the servers' state is dumped and fed through the
offline auditor together with the funding snapshot; a bench result that
fails its audit is reported as such.
"""

from __future__ import annotations

import csv
import heapq
import math
import select
import socket
import statistics
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

from . import crypto, wire
from .audit import AuditReport, audit
from .authority import AuthorityState
from .client import (
    Conversation,
    confirmation_conversation,
    transfer_conversation,
)
from .committee import AuthorityEntry, Committee, CommitteeConfig, ShardAssignment
from .core import (
    CertifiedTransfer,
    FundingTransaction,
    Recipient,
    TransferOrder,
    aggregate_certificate,
    authority_sign_order,
    sign_transfer_order,
    verify_certificate,
    verify_order_signature,
    verify_signed_order,
)
from .crypto import KeyPair, deterministic_keypairs
from .errors import MalformedMessage, ProtocolError, QuorumUnreachable, TransportTimeout
from .network import ShardServer, channel_key_for, fetch_state_dump
from .primary import PrimaryState

PHASES = ("transfer-orders", "confirmations", "end-to-end")
WAIT_MODES = ("first-quorum", "all-authorities")

CSV_COLUMNS = (
    "phase",
    "shards",
    "authorities",
    "load",
    "in_flight",
    "tx_per_s",
    "p50_ms",
    "p95_ms",
    "p99_ms",
)


def physical_cores() -> int:
    """Distinct physical cores from /proc/cpuinfo, or os.cpu_count()."""
    try:
        cores = set()
        package = core = None
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if ":" not in line:
                continue
            key, _, value = line.partition(":")
            key = key.strip()
            if key == "physical id":
                package = value.strip()
            elif key == "core id":
                core = value.strip()
            elif key == "processor" and core is not None:
                cores.add((package, core))
                package = core = None
        if core is not None:
            cores.add((package, core))
        if cores:
            return len(cores)
    except OSError:
        pass
    import os

    return os.cpu_count() or 1


def percentile(sorted_values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile over an ascending sequence."""
    if not sorted_values:
        return float("nan")
    rank = max(1, math.ceil(q * len(sorted_values)))
    return sorted_values[rank - 1]


# -- Microbenchmark --------------------------------------------------------


@dataclass(frozen=True, slots=True)
class MicrobenchRow:
    operation: str
    mean_us: float
    std_us: float
    runs: int


def _time_each(fn: Callable[[int], object], runs: int, warmup: int = 20) -> tuple[float, float]:
    for i in range(warmup):
        fn(i % max(1, runs))
    samples = []
    for i in range(runs):
        t0 = time.perf_counter_ns()
        fn(i)
        samples.append((time.perf_counter_ns() - t0) / 1000.0)
    return statistics.fmean(samples), statistics.pstdev(samples)


def run_microbench(
    iterations: int = 500, committee_size: int = 10, seed: int = 0
) -> list[MicrobenchRow]:
    """Time create+serialize and deserialize+check for orders, votes, and
    certificates, over `iterations` distinct inputs each."""
    if iterations < 1:
        raise ValueError("iterations must be positive")
    authority_keys = deterministic_keypairs(committee_size, f"microbench-authority-{seed}")
    committee = Committee(tuple(kp.public_bytes for kp in authority_keys))
    quorum = committee.quorum_threshold()
    sender = deterministic_keypairs(1, f"microbench-sender-{seed}")[0]
    recipient = Recipient.settlement(crypto.derive_address(bytes(32)))

    orders = [
        sign_transfer_order(sender, recipient, amount=1 + (i % 7), sequence=i)
        for i in range(iterations)
    ]
    order_frames = [wire.encode_message(o) for o in orders]
    votes = [authority_sign_order(authority_keys[0], o) for o in orders]
    vote_frames = [wire.encode_message(v) for v in votes]
    signature_sets = [
        tuple(
            sorted(
                (kp.public_bytes, kp.sign(crypto.TAG_VOTE, order.signed_bytes()))
                for kp in authority_keys[:quorum]
            )
        )
        for order in orders
    ]
    certs = [
        CertifiedTransfer(order=o, signatures=s) for o, s in zip(orders, signature_sets)
    ]
    cert_frames = [wire.encode_message(c) for c in certs]

    rows = []

    def add(operation: str, fn: Callable[[int], object]) -> None:
        crypto.clear_cache()  # checks must pay full verification cost
        mean, std = _time_each(fn, iterations)
        rows.append(MicrobenchRow(operation, mean, std, iterations))

    add(
        "create-transfer-order",
        lambda i: wire.encode_message(
            sign_transfer_order(sender, recipient, amount=1 + (i % 7), sequence=i)
        ),
    )
    add(
        "check-transfer-order",
        lambda i: verify_order_signature(wire.decode_message(order_frames[i])[2]),
    )
    add(
        "create-vote",
        lambda i: wire.encode_message(authority_sign_order(authority_keys[0], orders[i])),
    )
    add(
        "check-vote",
        lambda i: verify_signed_order(committee, wire.decode_message(vote_frames[i])[2]),
    )
    add(
        "create-certificate",
        lambda i: wire.encode_message(
            CertifiedTransfer(order=orders[i], signatures=signature_sets[i])
        ),
    )
    add(
        "check-certificate",
        lambda i: verify_certificate(committee, wire.decode_message(cert_frames[i])[2]),
    )
    return rows


def format_microbench(rows: Iterable[MicrobenchRow]) -> str:
    lines = [f"{'operation':<24} {'mean':>10} {'std':>10}  runs"]
    for row in rows:
        lines.append(
            f"{row.operation:<24} {row.mean_us:>8.1f}us {row.std_us:>8.1f}us  {row.runs}"
        )
    return "\n".join(lines)


# -- Load bench configuration and workload ---------------------------------


@dataclass(frozen=True)
class BenchConfig:
    committee_size: int = 4
    shards_per_authority: int = 1
    load: int = 1000
    in_flight: int = 100
    phase: str = "end-to-end"
    wait_mode: str = "first-quorum"
    seed: int = 0
    base_port: int = 28000
    funding_amount: int = 100
    transfer_amount: int = 3
    wan_rtt_ms: float = 0.0
    authority_index: int = 0  # target for the single-authority phases
    request_timeout: float = 3.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        if self.wait_mode not in WAIT_MODES:
            raise ValueError(f"wait mode must be one of {WAIT_MODES}")
        if self.in_flight < 1:
            raise ValueError("in-flight budget must be at least 1")
        if self.load < self.in_flight:
            raise ValueError("total load must be at least the in-flight budget")
        if self.committee_size < 4 or self.committee_size % 3 != 1:
            raise ValueError("committee size must be 3f+1 with f >= 1")
        if self.shards_per_authority < 1:
            raise ValueError("need at least one shard per authority")
        if not 0 <= self.authority_index < self.committee_size:
            raise ValueError("authority index outside the committee")


@dataclass
class BenchWorkload:
    """Everything generated before the clock starts."""

    config: BenchConfig
    authority_keys: list[KeyPair]
    committee: Committee
    shards: ShardAssignment
    senders: list[KeyPair]
    recipients: list[bytes]
    orders: list[TransferOrder]
    certificates: list[CertifiedTransfer]
    primary: PrimaryState


def build_workload(config: BenchConfig, with_certificates: Optional[bool] = None) -> BenchWorkload:
    """Deterministically generate accounts, funding, signed orders, and
    (when the phase needs them) certificates."""
    authority_keys = deterministic_keypairs(
        config.committee_size, f"bench-authority-{config.seed}"
    )
    committee = Committee(tuple(kp.public_bytes for kp in authority_keys))
    shards = ShardAssignment(config.shards_per_authority)
    senders = deterministic_keypairs(config.load, f"bench-account-{config.seed}")

    # Pair each sender with another account in the same shard so settlement
    # stays shard-local and the measured phase is not mixing in cross-shard
    # traffic. A shard with a single account pays itself.
    by_shard: dict[int, list[int]] = {}
    for i, kp in enumerate(senders):
        by_shard.setdefault(shards.which_shard(kp.address), []).append(i)
    recipients = [b""] * len(senders)
    for members in by_shard.values():
        for pos, i in enumerate(members):
            recipients[i] = senders[members[(pos + 1) % len(members)]].address

    primary = PrimaryState(committee)
    for kp in senders:
        primary.handle_funding_transaction(
            FundingTransaction(recipient=kp.address, amount=config.funding_amount)
        )

    orders = [
        sign_transfer_order(
            kp, Recipient.settlement(recipients[i]), config.transfer_amount, sequence=0
        )
        for i, kp in enumerate(senders)
    ]

    certificates: list[CertifiedTransfer] = []
    if with_certificates is None:
        with_certificates = config.phase == "confirmations"
    if with_certificates:
        quorum = committee.quorum_threshold()
        for order in orders:
            payload = order.signed_bytes()
            signatures = tuple(
                sorted(
                    (kp.public_bytes, kp.sign(crypto.TAG_VOTE, payload))
                    for kp in authority_keys[:quorum]
                )
            )
            certificates.append(CertifiedTransfer(order=order, signatures=signatures))

    return BenchWorkload(
        config=config,
        authority_keys=authority_keys,
        committee=committee,
        shards=shards,
        senders=senders,
        recipients=recipients,
        orders=orders,
        certificates=certificates,
        primary=primary,
    )


def bench_committee_config(config: BenchConfig, host: str = "127.0.0.1") -> CommitteeConfig:
    authority_keys = deterministic_keypairs(
        config.committee_size, f"bench-authority-{config.seed}"
    )
    entries = tuple(
        AuthorityEntry(
            name=kp.public_bytes,
            host=host,
            base_port=config.base_port + 64 * i,
            num_shards=config.shards_per_authority,
        )
        for i, kp in enumerate(authority_keys)
    )
    return CommitteeConfig(entries)


class LocalBenchServers:
    """Real shard servers on loopback, hosted by this process."""

    def __init__(
        self,
        committee_config: CommitteeConfig,
        workload: BenchWorkload,
        authority_indices: Iterable[int],
    ):
        self.committee_config = committee_config
        self.states: dict[tuple[int, int], AuthorityState] = {}
        self.servers: list[ShardServer] = []
        self.threads: list[threading.Thread] = []
        self._indices = list(authority_indices)
        for index in self._indices:
            keypair = workload.authority_keys[index]
            entry = committee_config.entries[index]
            channel_key = channel_key_for(keypair)
            for shard in range(entry.num_shards):
                state = AuthorityState(
                    keypair,
                    workload.committee,
                    shard_id=shard,
                    num_shards=entry.num_shards,
                )
                # Replay the funding history so every account starts funded.
                for sync in workload.primary.funding_log:
                    state.handle_primary_synchronization_order(sync)
                self.states[(index, shard)] = state
                self.servers.append(ShardServer(state, entry, channel_key))

    def start(self, ready_timeout: float = 10.0) -> None:
        for server in self.servers:
            thread = threading.Thread(target=server.serve_forever, daemon=True)
            thread.start()
            self.threads.append(thread)
        deadline = time.monotonic() + ready_timeout
        for server in self.servers:
            if not server.ready_event.wait(max(0.0, deadline - time.monotonic())):
                raise TransportTimeout(f"server on {server.endpoint} did not come up")

    def stop(self) -> None:
        for server in self.servers:
            server.stop()
        for thread in self.threads:
            thread.join(timeout=5.0)

    def dumps(self) -> list[tuple[str, bytes]]:
        return [
            (f"authority{a}-shard{s}.dump", state.canonical_dump())
            for (a, s), state in sorted(self.states.items())
        ]


# -- Windowed single-socket drivers ----------------------------------------


@dataclass
class PhaseStats:
    elapsed_s: float = 0.0
    latencies_ms: list[float] = field(default_factory=list)
    completed: int = 0
    failed: int = 0
    wire_errors: int = 0
    retransmits: int = 0
    per_shard: dict[int, int] = field(default_factory=dict)


def _wire_credit(frame_size: int, granted_rcvbuf: int) -> int:
    """Bound on unanswered datagrams kept on the wire at once.

    The kernel charges each queued datagram its payload plus skb
    bookkeeping, and silently drops arrivals once the receiver's socket
    buffer is full; a dropped request then stalls for a whole retransmit
    interval. The server requests the same buffer size we do, so our own
    granted size mirrors its, and half of it is assumed usable payload.
    """
    return max(64, (granted_rcvbuf // 2) // (frame_size + 900))


def _run_frame_window(
    items: Sequence[tuple[int, tuple[str, int], bytes]],
    window: int,
    retransmit_s: float,
    max_attempts: int,
    wan_rtt_s: float = 0.0,
) -> PhaseStats:
    """Drive pre-encoded single-round-trip frames with a bounded window.

    `items` maps item index -> (shard, endpoint, frame); frame i carries
    nonce i+1, which the server echoes, so responses need no decoding
    beyond the fixed header. With an emulated round-trip delay, a
    completed request keeps its window slot until the emulated response
    arrival, and its reported latency includes the delay.

    Sends are ack-clocked: beyond an initial burst sized to the socket
    buffer, each new datagram waits for a response to arrive, keeping the
    server's receive queue inside kernel limits however large the
    requested window is. The window still bounds outstanding requests.
    """
    stats = PhaseStats()
    total = len(items)
    first_send = [0.0] * total
    attempts = [0] * total
    done = [False] * total
    deadlines: list[tuple[float, int, int]] = []  # (when, index, attempt)
    embargo: list[tuple[float, int]] = []  # (slot release time, index)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 23)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 1 << 23)
    sock.setblocking(False)

    granted = sock.getsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF)
    frame_size = max(len(frame) for _, _, frame in items) if items else 512
    credit = _wire_credit(frame_size, granted)
    sent_datagrams = 0
    received_datagrams = 0

    in_window = 0
    next_item = 0
    finished = 0
    start = time.monotonic()
    last_completion = start
    last_receive = start
    try:
        while finished < total:
            now = time.monotonic()
            while embargo and embargo[0][0] <= now:
                heapq.heappop(embargo)
                in_window -= 1
            while (
                in_window < window
                and next_item < total
                and sent_datagrams - received_datagrams < credit
            ):
                shard, endpoint, frame = items[next_item]
                try:
                    sock.sendto(frame, endpoint)
                except OSError:
                    pass  # full buffers look like loss; the retransmit covers it
                sent_datagrams += 1
                first_send[next_item] = now
                attempts[next_item] = 1
                heapq.heappush(deadlines, (now + retransmit_s, next_item, 1))
                next_item += 1
                in_window += 1
            while True:
                try:
                    data, _addr = sock.recvfrom(65536)
                except BlockingIOError:
                    break
                except OSError:
                    break
                received_datagrams += 1
                last_receive = time.monotonic()
                if len(data) < 10:
                    continue
                index = int.from_bytes(data[2:10], "little") - 1
                if not 0 <= index < total or done[index] or not attempts[index]:
                    continue
                done[index] = True
                finished += 1
                now = time.monotonic()
                last_completion = now
                if data[1] == wire.TAG_ERROR:
                    stats.wire_errors += 1
                latency = now - first_send[index] + wan_rtt_s
                stats.latencies_ms.append(latency * 1000.0)
                stats.completed += 1
                shard = items[index][0]
                stats.per_shard[shard] = stats.per_shard.get(shard, 0) + 1
                if wan_rtt_s > 0:
                    heapq.heappush(embargo, (now + wan_rtt_s, index))
                else:
                    in_window -= 1
            now = time.monotonic()
            if sent_datagrams - received_datagrams >= credit and now - last_receive > retransmit_s:
                # Silence for a whole retransmit interval: whatever was on
                # the wire is gone, so the queue has drained.
                received_datagrams = sent_datagrams
            while deadlines and deadlines[0][0] <= now:
                _, index, attempt = heapq.heappop(deadlines)
                if done[index] or attempts[index] != attempt:
                    continue
                if attempt >= max_attempts:
                    done[index] = True
                    finished += 1
                    stats.failed += 1
                    in_window -= 1
                    continue
                if sent_datagrams - received_datagrams >= credit:
                    # No room on the wire; retry this deadline shortly.
                    heapq.heappush(deadlines, (now + 0.01, index, attempt))
                    break
                shard, endpoint, frame = items[index]
                try:
                    sock.sendto(frame, endpoint)
                except OSError:
                    pass
                sent_datagrams += 1
                stats.retransmits += 1
                attempts[index] = attempt + 1
                heapq.heappush(deadlines, (now + retransmit_s, index, attempt + 1))
            credit_blocked = sent_datagrams - received_datagrams >= credit
            wait = 0.2
            if deadlines and not credit_blocked:
                wait = min(wait, max(0.0, deadlines[0][0] - now))
            if embargo:
                wait = min(wait, max(0.0, embargo[0][0] - now))
            if credit_blocked:
                wait = min(wait, 0.002)
            if finished < total and wait > 0:
                select.select([sock], [], [], wait)
    finally:
        sock.close()
    stats.elapsed_s = max(last_completion - start, 1e-9)
    stats.latencies_ms.sort()
    return stats


class _LoopConversation:
    __slots__ = (
        "conversation",
        "name",
        "shard",
        "on_result",
        "on_error",
        "nonce",
        "endpoint",
        "frame",
        "attempts",
        "assembler",
        "done",
    )

    def __init__(self, conversation: Conversation, name: bytes, on_result, on_error):
        self.conversation = conversation
        self.name = name
        self.on_result = on_result
        self.on_error = on_error
        self.nonce = 0
        self.endpoint = None
        self.frame = b""
        self.attempts = 0
        self.assembler = None
        self.done = False


class _ConversationLoop:
    """Many client conversations multiplexed over one UDP socket.

    The conversation generators are the same ones the blocking client
    runs; here a single thread drives all of them, matching responses by
    nonce and retransmitting on a timer. An emulated round-trip delay is
    applied by deferring response delivery.
    """

    def __init__(
        self,
        config: CommitteeConfig,
        retransmit_s: float,
        max_attempts: int,
        wan_rtt_s: float = 0.0,
    ):
        self.config = config
        self.retransmit_s = retransmit_s
        self.max_attempts = max_attempts
        self.wan_rtt_s = wan_rtt_s
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 23)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 1 << 23)
        self.sock.setblocking(False)
        self._by_nonce: dict[int, _LoopConversation] = {}
        self._next_nonce = 1
        self._deadlines: list[tuple[float, int, int]] = []  # (when, nonce, attempt)
        self._delayed: list[tuple[float, int, object]] = []  # (when, nonce, response)
        self.live = 0

    def close(self) -> None:
        self.sock.close()

    def add(self, name: bytes, conversation: Conversation, on_result, on_error) -> None:
        conv = _LoopConversation(conversation, name, on_result, on_error)
        self.live += 1
        self._advance(conv, None, first=True)

    def _finish(self, conv: _LoopConversation, result=None, error: Optional[Exception] = None):
        if conv.done:
            return
        conv.done = True
        self._by_nonce.pop(conv.nonce, None)
        self.live -= 1
        if error is None:
            conv.on_result(result)
        else:
            conv.on_error(error)

    def _advance(self, conv: _LoopConversation, response, first: bool = False) -> None:
        self._by_nonce.pop(conv.nonce, None)
        try:
            if first:
                item = next(conv.conversation)
            else:
                item = conv.conversation.send(response)
        except StopIteration as stop:
            self._finish(conv, result=stop.value)
            return
        except ProtocolError as exc:
            self._finish(conv, error=exc)
            return
        shard, message = item
        conv.shard = shard
        conv.nonce = self._next_nonce
        self._next_nonce += 1
        conv.frame = wire.encode_message(message, conv.nonce)
        conv.endpoint = self.config.entry(conv.name).shard_endpoint(shard)
        conv.attempts = 1
        conv.assembler = None
        self._by_nonce[conv.nonce] = conv
        try:
            self.sock.sendto(conv.frame, conv.endpoint)
        except OSError:
            pass
        heapq.heappush(self._deadlines, (time.monotonic() + self.retransmit_s, conv.nonce, 1))

    def _deliver(self, conv: _LoopConversation, response) -> None:
        if self.wan_rtt_s > 0:
            heapq.heappush(
                self._delayed, (time.monotonic() + self.wan_rtt_s, conv.nonce, response)
            )
        else:
            self._advance(conv, response)

    def _on_datagram(self, data: bytes) -> None:
        try:
            tag, nonce, message = wire.decode_message(data)
        except (ProtocolError, Exception):  # noqa: BLE001 - garbage datagrams are dropped
            return
        conv = self._by_nonce.get(nonce)
        if conv is None or conv.done:
            return
        if tag == wire.TAG_CHUNK:
            if conv.assembler is None:
                conv.assembler = wire.ChunkAssembler()
            complete = conv.assembler.add(message)
            if complete is None:
                return
            _, _, message = wire.decode_message(complete)
        self._deliver(conv, message)

    def step(self, max_wait: float = 0.05) -> None:
        now = time.monotonic()
        while self._delayed and self._delayed[0][0] <= now:
            _, nonce, response = heapq.heappop(self._delayed)
            conv = self._by_nonce.get(nonce)
            if conv is not None and not conv.done:
                self._advance(conv, response)
        while True:
            try:
                data, _addr = self.sock.recvfrom(65536)
            except BlockingIOError:
                break
            except OSError:
                break
            self._on_datagram(data)
        now = time.monotonic()
        while self._deadlines and self._deadlines[0][0] <= now:
            _, nonce, attempt = heapq.heappop(self._deadlines)
            conv = self._by_nonce.get(nonce)
            if conv is None or conv.done or conv.attempts != attempt:
                continue
            if attempt >= self.max_attempts:
                self._finish(conv, error=TransportTimeout(f"no response from {conv.endpoint}"))
                continue
            try:
                self.sock.sendto(conv.frame, conv.endpoint)
            except OSError:
                pass
            conv.attempts = attempt + 1
            heapq.heappush(self._deadlines, (now + self.retransmit_s, nonce, attempt + 1))
        wait = max_wait
        if self._deadlines:
            wait = min(wait, max(0.0, self._deadlines[0][0] - now))
        if self._delayed:
            wait = min(wait, max(0.0, self._delayed[0][0] - now))
        if wait > 0:
            select.select([self.sock], [], [], wait)


class _EndToEndTx:
    """One transfer driven to settlement: votes, certificate, confirmations."""

    __slots__ = (
        "index",
        "order",
        "votes",
        "vote_failures",
        "cert",
        "confirms",
        "confirm_failures",
        "t0",
        "finished",
    )

    def __init__(self, index: int, order: TransferOrder):
        self.index = index
        self.order = order
        self.votes: dict[bytes, object] = {}
        self.vote_failures = 0
        self.cert: Optional[CertifiedTransfer] = None
        self.confirms = 0
        self.confirm_failures = 0
        self.t0 = 0.0
        self.finished = False


def _run_end_to_end(
    workload: BenchWorkload,
    committee_config: CommitteeConfig,
    window: int,
    wait_mode: str,
    retransmit_s: float,
    max_attempts: int,
    wan_rtt_s: float,
) -> PhaseStats:
    committee = workload.committee
    shards = workload.shards
    names = committee.authorities
    need = len(names) if wait_mode == "all-authorities" else committee.quorum_threshold()
    stats = PhaseStats()
    loop = _ConversationLoop(committee_config, retransmit_s, max_attempts, wan_rtt_s)
    funding_by_addr: dict[bytes, list] = {}
    for sync in workload.primary.funding_log:
        funding_by_addr.setdefault(sync.recipient, []).append(sync)

    active = 0
    next_tx = 0
    finished = 0
    total = len(workload.orders)
    start = time.monotonic()
    last_completion = start

    def finish_tx(tx: _EndToEndTx, ok: bool) -> None:
        nonlocal active, finished, last_completion
        if tx.finished:
            return
        tx.finished = True
        active -= 1
        finished += 1
        now = time.monotonic()
        last_completion = now
        if ok:
            stats.completed += 1
            stats.latencies_ms.append((now - tx.t0) * 1000.0)
            shard = shards.which_shard(tx.order.sender)
            stats.per_shard[shard] = stats.per_shard.get(shard, 0) + 1
        else:
            stats.failed += 1
        start_more()

    def start_confirmations(tx: _EndToEndTx) -> None:
        try:
            tx.cert = aggregate_certificate(committee, tx.order, list(tx.votes.values()))
        except ProtocolError:
            finish_tx(tx, ok=False)
            return
        none_provider = lambda sender, sequence: None
        empty_funding = lambda: []
        for name in names:
            loop.add(
                name,
                confirmation_conversation(shards, tx.cert, none_provider, empty_funding),
                on_result=lambda _r, tx=tx: on_confirm(tx),
                on_error=lambda _e, tx=tx: on_confirm_failed(tx),
            )

    def on_confirm(tx: _EndToEndTx) -> None:
        tx.confirms += 1
        if not tx.finished and tx.confirms >= need:
            finish_tx(tx, ok=True)

    def on_confirm_failed(tx: _EndToEndTx) -> None:
        tx.confirm_failures += 1
        if not tx.finished and len(names) - tx.confirm_failures < need:
            finish_tx(tx, ok=False)

    def on_vote(tx: _EndToEndTx, name: bytes, vote) -> None:
        if tx.cert is not None or tx.finished:
            return
        tx.votes[name] = vote
        if len(tx.votes) >= need:
            start_confirmations(tx)

    def on_vote_failed(tx: _EndToEndTx) -> None:
        tx.vote_failures += 1
        if tx.cert is None and not tx.finished and len(names) - tx.vote_failures < need:
            finish_tx(tx, ok=False)

    def start_more() -> None:
        nonlocal next_tx, active
        while active < window and next_tx < total:
            order = workload.orders[next_tx]
            tx = _EndToEndTx(next_tx, order)
            tx.t0 = time.monotonic()
            next_tx += 1
            active += 1
            sender_funding = funding_by_addr.get(order.sender, [])
            provider = lambda sender, sequence: None
            funding = lambda fs=sender_funding: list(fs)
            for name in names:
                loop.add(
                    name,
                    transfer_conversation(
                        committee, shards, name, order, provider, funding
                    ),
                    on_result=lambda vote, tx=tx, name=name: on_vote(tx, name, vote),
                    on_error=lambda _e, tx=tx: on_vote_failed(tx),
                )

    try:
        start_more()
        while finished < total:
            loop.step()
    finally:
        loop.close()
    stats.elapsed_s = max(last_completion - start, 1e-9)
    stats.latencies_ms.sort()
    return stats


# -- Whole bench runs ------------------------------------------------------


@dataclass
class BenchResult:
    config: BenchConfig
    elapsed_s: float
    tx_per_s: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    completed: int
    failed: int
    wire_errors: int
    retransmits: int
    per_shard: dict[int, int]
    audit_ok: Optional[bool] = None
    audit_findings: int = 0

    def csv_row(self) -> dict:
        return {
            "phase": self.config.phase,
            "shards": self.config.shards_per_authority,
            "authorities": self.config.committee_size,
            "load": self.config.load,
            "in_flight": self.config.in_flight,
            "tx_per_s": f"{self.tx_per_s:.2f}",
            "p50_ms": f"{self.p50_ms:.3f}",
            "p95_ms": f"{self.p95_ms:.3f}",
            "p99_ms": f"{self.p99_ms:.3f}",
        }


def write_csv(path: Union[str, Path], results: Iterable[BenchResult]) -> None:
    """Append result rows, writing the header only for a new file."""
    target = Path(path)
    new_file = not target.exists() or target.stat().st_size == 0
    with target.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new_file:
            writer.writeheader()
        for result in results:
            writer.writerow(result.csv_row())


def _result_from_stats(config: BenchConfig, stats: PhaseStats) -> BenchResult:
    lat = stats.latencies_ms
    return BenchResult(
        config=config,
        elapsed_s=stats.elapsed_s,
        tx_per_s=stats.completed / stats.elapsed_s,
        p50_ms=percentile(lat, 0.50),
        p95_ms=percentile(lat, 0.95),
        p99_ms=percentile(lat, 0.99),
        completed=stats.completed,
        failed=stats.failed,
        wire_errors=stats.wire_errors,
        retransmits=stats.retransmits,
        per_shard=dict(sorted(stats.per_shard.items())),
    )


def format_result(result: BenchResult) -> str:
    cfg = result.config
    lines = [
        f"phase={cfg.phase} committee={cfg.committee_size} shards={cfg.shards_per_authority}"
        f" load={cfg.load} in_flight={cfg.in_flight} wait={cfg.wait_mode}",
        f"  {result.tx_per_s:,.1f} tx/s over {result.elapsed_s:.2f}s"
        f" ({result.completed} ok, {result.failed} failed,"
        f" {result.wire_errors} error replies, {result.retransmits} retransmits)",
        f"  latency p50={result.p50_ms:.2f}ms p95={result.p95_ms:.2f}ms p99={result.p99_ms:.2f}ms",
        "  per-shard: "
        + ", ".join(f"shard {s}: {n}" for s, n in result.per_shard.items()),
    ]
    if result.audit_ok is not None:
        lines.append(
            f"  post-run audit: {'PASS' if result.audit_ok else 'FAIL'}"
            f" ({result.audit_findings} findings)"
        )
    return "\n".join(lines)


def _phase_items(
    workload: BenchWorkload,
    committee_config: CommitteeConfig,
    authority_index: int,
) -> list[tuple[int, tuple[str, int], bytes]]:
    """Pre-encode single-round-trip frames for the one-authority phases.

    Frame i carries nonce i+1 so responses map straight back to items.
    """
    entry = committee_config.entries[authority_index]
    shards = workload.shards
    items = []
    payloads: Sequence = (
        workload.certificates if workload.config.phase == "confirmations" else workload.orders
    )
    for i, message in enumerate(payloads):
        sender = message.order.sender if isinstance(message, CertifiedTransfer) else message.sender
        shard = shards.which_shard(sender)
        items.append((shard, entry.shard_endpoint(shard), wire.encode_message(message, i + 1)))
    return items


def _retransmit_interval(config: BenchConfig) -> float:
    # Queueing at the server scales with the window; retransmitting into a
    # full queue only makes it longer. Ack-clocked pacing keeps the real
    # queue depth within a few thousand frames regardless of the window.
    depth = min(config.in_flight, 4096)
    return max(1.0, 2.0 * config.wan_rtt_ms / 1000.0 + 0.002 * depth)


def run_bench(
    config: BenchConfig,
    committee_config: Optional[CommitteeConfig] = None,
    run_audit: bool = True,
    max_attempts: int = 8,
) -> BenchResult:
    """Run one load phase and return its measurements.

    Without a committee config this hosts the committee in-process on
    loopback (spawning only the authorities the phase talks to), runs the
    phase, then audits the resulting authority state dumps against the
    funding snapshot. With an external committee config, traffic goes to
    whatever is listening there and the audit fetches dumps over TCP.
    """
    crypto.clear_cache()  # runs in one process must not warm each other up
    workload = build_workload(config)
    local = committee_config is None
    if local:
        committee_config = bench_committee_config(config)
    if config.phase == "end-to-end":
        indices = range(config.committee_size)
    else:
        indices = [config.authority_index]

    servers = None
    if local:
        servers = LocalBenchServers(committee_config, workload, indices)
        servers.start()
    try:
        retransmit_s = _retransmit_interval(config)
        if config.phase == "end-to-end":
            stats = _run_end_to_end(
                workload,
                committee_config,
                window=config.in_flight,
                wait_mode=config.wait_mode,
                retransmit_s=max(retransmit_s, config.request_timeout),
                max_attempts=max_attempts,
                wan_rtt_s=config.wan_rtt_ms / 1000.0,
            )
        else:
            items = _phase_items(workload, committee_config, config.authority_index)
            stats = _run_frame_window(
                items,
                window=config.in_flight,
                retransmit_s=retransmit_s,
                max_attempts=max_attempts,
                wan_rtt_s=config.wan_rtt_ms / 1000.0,
            )
        result = _result_from_stats(config, stats)
        if run_audit:
            if servers is not None:
                servers.stop()
                dumps = servers.dumps()
                servers = None
            else:
                dumps = []
                for index in indices:
                    entry = committee_config.entries[index]
                    for shard in range(entry.num_shards):
                        try:
                            raw = fetch_state_dump(entry.shard_endpoint(shard))
                        except (ProtocolError, OSError):
                            continue
                        dumps.append((f"authority{index}-shard{shard}.dump", raw))
            report = audit(workload.committee, dumps, workload.primary.to_snapshot())
            result.audit_ok = report.ok
            result.audit_findings = len(report.findings)
        return result
    finally:
        if servers is not None:
            servers.stop()
