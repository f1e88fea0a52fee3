"""Transport layer: shard servers, retrying client transport, and the
authenticated deliver-once inter-shard channel.

Topology: authority `a` serves shard `s` on UDP and TCP port
base_port(a) + s. UDP carries all request/response traffic (responses
over the MTU budget are chunked); TCP serves bulk state dumps. Shards of
one authority exchange cross-shard credits over the same UDP sockets
using MAC-authenticated, sequenced envelopes with retransmission and
cumulative acks, which yields exactly-once in-order delivery on top of a
lossy datagram network.

Each shard's state has a single writer: the shard's own server loop.
"""

from __future__ import annotations

import hashlib
import os
import random
import selectors
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from . import wire
from .authority import AuthorityState
from .committee import AuthorityEntry, CommitteeConfig
from .core import AccountInfoRequest, ErrorResponse
from .errors import ErrorCode, MalformedMessage, ProtocolError, TransportTimeout

Endpoint = tuple[str, int]

AHEAD_WINDOW = 4096  # out-of-order envelopes buffered per source
RETRANSMIT_BATCH = 64


def channel_key_for(keypair) -> bytes:
    """MAC key for one authority's inter-shard channel, derived from its
    signing secret so every process serving its shards agrees on it."""
    return hashlib.sha256(b"shard-channel-key:" + keypair.secret_bytes).digest()


class LossPolicy:
    """Seeded coin for injecting symmetric datagram loss in tests."""

    def __init__(self, loss_rate: float = 0.0, seed: Optional[int] = None):
        self.loss_rate = loss_rate
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def drop(self) -> bool:
        if self.loss_rate <= 0.0:
            return False
        with self._lock:
            return self._rng.random() < self.loss_rate


class InterShardChannel:
    """Sans-io endpoint of the intra-authority channel for one shard.

    Wire rules: envelopes carry (source, dest, seq, payload, mac); seqs
    start at 1 and are per (source, dest) stream; acks are cumulative.
    Tampered or replayed traffic is dropped and counted, never delivered.
    """

    def __init__(self, key: bytes, shard_id: int):
        self.key = key
        self.shard_id = shard_id
        self.next_seq: dict[int, int] = {}
        self.unacked: dict[int, dict[int, bytes]] = {}
        self.expected: dict[int, int] = {}
        self.ahead: dict[int, dict[int, bytes]] = {}
        self.mac_failures = 0
        self.delivered = 0

    def _mac(self, kind: bytes, source: int, dest: int, seq: int, payload: bytes = b"") -> bytes:
        h = hashlib.blake2b(key=self.key, digest_size=wire.MAC_LEN)
        h.update(kind)
        h.update(struct.pack("<IIQ", source, dest, seq))
        h.update(payload)
        return h.digest()

    def send(self, dest_shard: int, payload: bytes) -> bytes:
        """Queue a payload for `dest_shard`; returns the frame to transmit."""
        seq = self.next_seq.get(dest_shard, 1)
        self.next_seq[dest_shard] = seq + 1
        env = wire.InterShardEnvelope(
            source_shard=self.shard_id,
            dest_shard=dest_shard,
            seq=seq,
            payload=payload,
            mac=self._mac(b"env", self.shard_id, dest_shard, seq, payload),
        )
        frame = wire.encode_message(env)
        self.unacked.setdefault(dest_shard, {})[seq] = frame
        return frame

    def on_envelope(self, env: wire.InterShardEnvelope) -> tuple[list[bytes], Optional[bytes]]:
        """Returns (deliverable payloads in order, ack frame to send back)."""
        if env.mac != self._mac(b"env", env.source_shard, env.dest_shard, env.seq, env.payload):
            self.mac_failures += 1
            return [], None
        if env.dest_shard != self.shard_id:
            return [], None
        source = env.source_shard
        expected = self.expected.get(source, 1)
        if env.seq >= expected and env.seq < expected + AHEAD_WINDOW:
            self.ahead.setdefault(source, {})[env.seq] = env.payload
        out: list[bytes] = []
        stash = self.ahead.get(source, {})
        while expected in stash:
            out.append(stash.pop(expected))
            expected += 1
        self.expected[source] = expected
        self.delivered += len(out)
        ack_seq = expected - 1
        ack = wire.InterShardAck(
            source_shard=source,
            dest_shard=self.shard_id,
            ack_seq=ack_seq,
            mac=self._mac(b"ack", source, self.shard_id, ack_seq),
        )
        return out, wire.encode_message(ack)

    def on_ack(self, ack: wire.InterShardAck) -> None:
        if ack.mac != self._mac(b"ack", ack.source_shard, ack.dest_shard, ack.ack_seq):
            self.mac_failures += 1
            return
        if ack.source_shard != self.shard_id:
            return
        pending = self.unacked.get(ack.dest_shard)
        if pending:
            for seq in [s for s in pending if s <= ack.ack_seq]:
                del pending[seq]

    def frames_due(self) -> list[tuple[int, bytes]]:
        """Unacked frames to retransmit, oldest first, bounded per cycle."""
        due: list[tuple[int, bytes]] = []
        for dest, pending in self.unacked.items():
            for seq in sorted(pending)[:RETRANSMIT_BATCH]:
                due.append((dest, pending[seq]))
        return due

    def idle(self) -> bool:
        return all(not pending for pending in self.unacked.values())


def dispatch_message(
    state: AuthorityState,
    tag: int,
    message,
    forward_update: Callable,
    internal: bool = False,
):
    """Apply one decoded message to a shard; returns the response message.

    `internal` marks traffic from the authenticated inter-shard channel;
    cross-shard commits are rejected on the public path.
    """
    try:
        if tag == wire.TAG_TRANSFER_ORDER:
            return state.handle_transfer_order(message)
        if tag == wire.TAG_CONFIRMATION:
            response, update = state.handle_confirmation_order(message)
            if update is not None:
                forward_update(update)
            return response
        if tag == wire.TAG_ACCOUNT_INFO_REQUEST:
            return state.handle_account_info_query(message)
        if tag == wire.TAG_PRIMARY_SYNC:
            state.handle_primary_synchronization_order(message)
            return state.account_summary(message.recipient)
        if tag == wire.TAG_CROSS_SHARD_COMMIT and internal:
            state.handle_cross_shard_commit(message.certificate)
            return None
        raise MalformedMessage(f"tag {tag} not servable here")
    except ProtocolError as exc:
        return ErrorResponse(code=int(exc.code), detail=str(exc))


class ShardServer:
    """One shard's server: UDP requests, TCP dumps, channel housekeeping."""

    def __init__(
        self,
        state: AuthorityState,
        entry: AuthorityEntry,
        channel_key: bytes,
        poll_interval: float = 0.05,
        recv_buffer: int = 1 << 23,
    ):
        self.state = state
        self.entry = entry
        self.endpoint = entry.shard_endpoint(state.shard_id)
        self.channel = InterShardChannel(channel_key, state.shard_id)
        self.poll_interval = poll_interval
        self.stop_event = threading.Event()
        self.ready_event = threading.Event()
        self.requests_served = 0
        self._recv_buffer = recv_buffer
        self._udp: Optional[socket.socket] = None
        self._tcp: Optional[socket.socket] = None

    def _peer_endpoint(self, shard_id: int) -> Endpoint:
        return self.entry.shard_endpoint(shard_id)

    def _forward_update(self, update) -> None:
        payload = wire.encode_message(update)
        frame = self.channel.send(update.shard_id, payload)
        self._udp.sendto(frame, self._peer_endpoint(update.shard_id))

    def _apply_internal(self, payload: bytes) -> None:
        tag, _, message = wire.decode_message(payload)
        if tag == wire.TAG_CROSS_SHARD_COMMIT:
            dispatch_message(self.state, tag, message, self._forward_update, internal=True)
        elif tag == wire.TAG_PRIMARY_SYNC:
            dispatch_message(self.state, tag, message, self._forward_update, internal=True)
        # anything else on the internal channel is silently ignored

    def _reply(self, response, nonce: int, addr: Endpoint) -> None:
        frame = wire.encode_message(response, nonce)
        for datagram in wire.split_into_chunks(frame, nonce):
            self._udp.sendto(datagram, addr)

    def _handle_datagram(self, data: bytes, addr: Endpoint) -> None:
        try:
            tag, nonce, message = wire.decode_message(data)
        except (ProtocolError, Exception) as exc:  # noqa: BLE001 - reply and move on
            detail = str(exc) if isinstance(exc, ProtocolError) else "unparseable datagram"
            self._reply(ErrorResponse(int(ErrorCode.MALFORMED_MESSAGE), detail), 0, addr)
            return
        self.requests_served += 1
        if tag == wire.TAG_INTER_SHARD:
            payloads, ack = self.channel.on_envelope(message)
            for payload in payloads:
                self._apply_internal(payload)
            if ack is not None:
                self._udp.sendto(ack, addr)
            return
        if tag == wire.TAG_INTER_SHARD_ACK:
            self.channel.on_ack(message)
            return
        if tag == wire.TAG_STATE_DUMP_REQUEST:
            self._reply(
                ErrorResponse(int(ErrorCode.MALFORMED_MESSAGE), "state dumps are TCP only"),
                nonce,
                addr,
            )
            return
        response = dispatch_message(self.state, tag, message, self._forward_update)
        if response is not None:
            self._reply(response, nonce, addr)

    def _handle_stream_frame(self, frame: bytes) -> bytes:
        try:
            tag, nonce, message = wire.decode_message(frame)
            if tag == wire.TAG_STATE_DUMP_REQUEST:
                response = wire.StateDumpResponse(data=self.state.canonical_dump())
            else:
                response = dispatch_message(self.state, tag, message, self._forward_update)
                if response is None:
                    response = ErrorResponse(int(ErrorCode.MALFORMED_MESSAGE), "no response")
        except ProtocolError as exc:
            response, nonce = ErrorResponse(int(exc.code), str(exc)), 0
        out = wire.encode_message(response, nonce)
        return struct.pack("<I", len(out)) + out

    def serve_forever(self) -> None:
        self._udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._udp.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, self._recv_buffer)
        self._udp.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, self._recv_buffer)
        self._udp.bind(self.endpoint)
        self._udp.setblocking(False)
        self._tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._tcp.bind(self.endpoint)
        self._tcp.listen(16)
        self._tcp.setblocking(False)
        sel = selectors.DefaultSelector()
        sel.register(self._udp, selectors.EVENT_READ, "udp")
        sel.register(self._tcp, selectors.EVENT_READ, "accept")
        buffers: dict[socket.socket, bytearray] = {}
        self.ready_event.set()
        try:
            while not self.stop_event.is_set():
                for key, _ in sel.select(timeout=self.poll_interval):
                    if key.data == "udp":
                        # Drain everything that is ready before polling again.
                        while True:
                            try:
                                data, addr = self._udp.recvfrom(65536)
                            except BlockingIOError:
                                break
                            except OSError:
                                return
                            self._handle_datagram(data, addr)
                    elif key.data == "accept":
                        try:
                            conn, _ = self._tcp.accept()
                        except OSError:
                            continue
                        conn.setblocking(False)
                        buffers[conn] = bytearray()
                        sel.register(conn, selectors.EVENT_READ, "conn")
                    else:
                        conn = key.fileobj
                        try:
                            data = conn.recv(65536)
                        except (BlockingIOError, InterruptedError):
                            continue
                        except OSError:
                            data = b""
                        if not data:
                            sel.unregister(conn)
                            conn.close()
                            buffers.pop(conn, None)
                            continue
                        buf = buffers[conn]
                        buf.extend(data)
                        while len(buf) >= 4:
                            (length,) = struct.unpack("<I", buf[:4])
                            if length > wire.MAX_BYTES_FIELD or len(buf) < 4 + length:
                                break
                            frame = bytes(buf[4 : 4 + length])
                            del buf[: 4 + length]
                            conn.setblocking(True)
                            conn.sendall(self._handle_stream_frame(frame))
                            conn.setblocking(False)
                for dest, frame in self.channel.frames_due():
                    self._udp.sendto(frame, self._peer_endpoint(dest))
        finally:
            sel.close()
            self._udp.close()
            self._tcp.close()
            for conn in buffers:
                conn.close()

    def stop(self) -> None:
        self.stop_event.set()


class UdpClientTransport:
    """Blocking request/response over UDP with retransmission.

    Responses are matched to requests by nonce; duplicates are discarded;
    chunked responses are reassembled. Optional symmetric loss injection
    simulates a bad network on loopback.
    """

    def __init__(self, loss: Optional[LossPolicy] = None):
        self.loss = loss or LossPolicy()

    def request(
        self,
        endpoint: Endpoint,
        message,
        timeout: float = 3.0,
        retry_interval: float = 0.1,
    ):
        nonce = int.from_bytes(os.urandom(8), "little")
        frame = wire.encode_message(message, nonce)
        deadline = time.monotonic() + timeout
        assembler = wire.ChunkAssembler()
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            sock.connect(endpoint)
            while True:
                now = time.monotonic()
                if now >= deadline:
                    raise TransportTimeout(f"no response from {endpoint}")
                if not self.loss.drop():
                    try:
                        sock.send(frame)
                    except OSError as exc:
                        raise TransportTimeout(f"send to {endpoint}: {exc}") from exc
                slice_end = min(now + retry_interval, deadline)
                while True:
                    remaining = slice_end - time.monotonic()
                    if remaining <= 0:
                        break
                    sock.settimeout(remaining)
                    try:
                        data = sock.recv(65536)
                    except socket.timeout:
                        break
                    except OSError:
                        break
                    if self.loss.drop():
                        continue
                    try:
                        tag, rnonce, response = wire.decode_message(data)
                    except ProtocolError:
                        continue
                    if rnonce != nonce:
                        continue
                    if tag == wire.TAG_CHUNK:
                        complete = assembler.add(response)
                        if complete is None:
                            continue
                        _, _, inner = wire.decode_message(complete)
                        return inner
                    return response


class TcpClientTransport:
    """Length-framed request/response over a fresh TCP connection."""

    def request(self, endpoint: Endpoint, message, timeout: float = 10.0):
        frame = wire.encode_message(message, nonce=0)
        with socket.create_connection(endpoint, timeout=timeout) as sock:
            sock.sendall(struct.pack("<I", len(frame)) + frame)
            header = _read_exact(sock, 4)
            (length,) = struct.unpack("<I", header)
            if length > wire.MAX_BYTES_FIELD:
                raise MalformedMessage("oversized stream response")
            data = _read_exact(sock, length)
        _, _, response = wire.decode_message(data)
        return response


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        piece = sock.recv(n - len(buf))
        if not piece:
            raise TransportTimeout("connection closed mid-frame")
        buf.extend(piece)
    return bytes(buf)


def fetch_state_dump(endpoint: Endpoint, timeout: float = 10.0) -> bytes:
    response = TcpClientTransport().request(endpoint, wire.StateDumpRequest(), timeout=timeout)
    if not isinstance(response, wire.StateDumpResponse):
        raise MalformedMessage(f"expected a state dump, got {type(response).__name__}")
    return response.data


class LocalTransport:
    """RequestTransport over an in-process deployment (no sockets)."""

    def __init__(self, deployment: "LocalDeployment", config: CommitteeConfig):
        self._routes: dict[Endpoint, tuple[bytes, int]] = {}
        for entry in config.entries:
            for shard in range(entry.num_shards):
                self._routes[entry.shard_endpoint(shard)] = (entry.name, shard)
        self.deployment = deployment

    def request(self, endpoint: Endpoint, message, timeout: float = 0.0, retry_interval: float = 0.0):
        name, shard = self._routes[endpoint]
        return self.deployment.request(name, shard, message)


class LocalDeployment:
    """All authority shards as in-process objects with synchronous routing.

    Cross-shard updates are applied inline, so the deployment is always
    quiescent between calls. Supports crashing authorities (requests time
    out) and per-authority response overrides for scripted misbehavior.
    """

    def __init__(self, config: CommitteeConfig, keypairs: dict[bytes, "object"]):
        self.config = config
        self.nodes: dict[tuple[bytes, int], AuthorityState] = {}
        for entry in config.entries:
            for shard in range(entry.num_shards):
                self.nodes[(entry.name, shard)] = AuthorityState(
                    keypairs[entry.name],
                    config.committee,
                    shard_id=shard,
                    num_shards=entry.num_shards,
                )
        self.crashed: set[bytes] = set()
        # name -> fn(state, tag, message, default_handler) -> response
        self.overrides: dict[bytes, Callable] = {}
        self.transport = LocalTransport(self, config)

    def authority_shards(self, name: bytes) -> list[AuthorityState]:
        entry = self.config.entry(name)
        return [self.nodes[(name, s)] for s in range(entry.num_shards)]

    def _forwarder(self, name: bytes) -> Callable:
        def forward(update) -> None:
            target = self.nodes[(name, update.shard_id)]
            target.handle_cross_shard_commit(update.certificate)

        return forward

    def request(self, name: bytes, shard: int, message):
        if name in self.crashed:
            raise TransportTimeout("authority crashed")
        state = self.nodes[(name, shard)]
        frame = wire.encode_message(message)  # exercise the codecs on every hop
        tag, _, decoded = wire.decode_message(frame)
        default = lambda: dispatch_message(state, tag, decoded, self._forwarder(name))
        override = self.overrides.get(name)
        if override is not None:
            return override(state, tag, decoded, default)
        return default()

    def broadcast_sync(self, sync) -> None:
        """Deliver a funding order to every shard of each live authority."""
        for (name, _shard), state in self.nodes.items():
            if name not in self.crashed:
                state.handle_primary_synchronization_order(sync)

    def state_hashes(self, name: bytes) -> list[bytes]:
        return [s.state_hash() for s in self.authority_shards(name)]
