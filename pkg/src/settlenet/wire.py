"""Canonical binary codecs for every wire message.

Frame layout (documented in docs/wire_format.md, fixture vectors under
tests/fixtures/):

    [1-byte version][1-byte tag][8-byte nonce][payload]

Integers are little-endian fixed width. Variable-length fields carry a
4-byte length prefix. Decoding is strict: unknown tags, truncated input,
oversized fields, and trailing bytes are all rejected, so
decode(encode(m)) = m and nothing else parses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

from .core import (
    AccountInfoRequest,
    AccountInfoResponse,
    CertifiedTransfer,
    CrossShardUpdate,
    ErrorResponse,
    PrimarySynchronizationOrder,
    Recipient,
    RecipientKind,
    SignedTransferOrder,
    TransferOrder,
)
from .crypto import ADDRESS_LEN, KEY_LEN, SIGNATURE_LEN
from .errors import MalformedMessage

PROTOCOL_VERSION = 1
MTU = 1400
MAC_LEN = 16
MAX_USER_DATA = 128
# Caps on list sizes so a hostile datagram cannot balloon memory.
MAX_SIGNATURES = 1024
MAX_CERTS_PER_RESPONSE = 4096
MAX_BYTES_FIELD = 1 << 26

TAG_TRANSFER_ORDER = 1
TAG_SIGNED_ORDER = 2
TAG_CONFIRMATION = 3
TAG_ACCOUNT_INFO_REQUEST = 4
TAG_ACCOUNT_INFO_RESPONSE = 5
TAG_CROSS_SHARD_COMMIT = 6
TAG_PRIMARY_SYNC = 7
TAG_ERROR = 8
TAG_INTER_SHARD = 9
TAG_INTER_SHARD_ACK = 10
TAG_CHUNK = 11
TAG_STATE_DUMP_REQUEST = 12
TAG_STATE_DUMP_RESPONSE = 13


@dataclass(frozen=True, slots=True)
class InterShardEnvelope:
    """Sequenced, MAC-authenticated payload between shards of one authority."""

    source_shard: int
    dest_shard: int
    seq: int
    payload: bytes
    mac: bytes


@dataclass(frozen=True, slots=True)
class InterShardAck:
    """Cumulative acknowledgement: all seq <= ack_seq delivered."""

    source_shard: int
    dest_shard: int
    ack_seq: int
    mac: bytes


@dataclass(frozen=True, slots=True)
class Chunk:
    """One fragment of a response too large for a single datagram."""

    total: int
    index: int
    data: bytes


@dataclass(frozen=True, slots=True)
class StateDumpRequest:
    pass


@dataclass(frozen=True, slots=True)
class StateDumpResponse:
    data: bytes


WireMessage = Union[
    TransferOrder,
    SignedTransferOrder,
    CertifiedTransfer,
    AccountInfoRequest,
    AccountInfoResponse,
    CrossShardUpdate,
    PrimarySynchronizationOrder,
    ErrorResponse,
    InterShardEnvelope,
    InterShardAck,
    Chunk,
    StateDumpRequest,
    StateDumpResponse,
]


class Reader:
    """Strict cursor over immutable bytes; every read checks bounds."""

    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise MalformedMessage("truncated message")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def i128(self) -> int:
        return int.from_bytes(self.take(16), "little", signed=True)

    def bytes_field(self, cap: int = MAX_BYTES_FIELD) -> bytes:
        n = self.u32()
        if n > cap:
            raise MalformedMessage(f"byte field of {n} exceeds cap {cap}")
        return self.take(n)

    def expect_end(self) -> None:
        if self.pos != len(self.data):
            raise MalformedMessage("trailing bytes after message")


def _encode_bytes(out: list, data: bytes) -> None:
    out.append(struct.pack("<I", len(data)))
    out.append(data)


def _encode_order(out: list, order: TransferOrder) -> None:
    out.append(order.signed_bytes())


def _decode_order(r: Reader) -> TransferOrder:
    sender = r.take(ADDRESS_LEN)
    sender_key = r.take(KEY_LEN)
    kind = r.u8()
    try:
        rkind = RecipientKind(kind)
    except ValueError:
        raise MalformedMessage(f"bad recipient kind {kind}") from None
    raddr = r.take(ADDRESS_LEN)
    amount, sequence = struct.unpack("<QQ", r.take(16))
    user_data = r.bytes_field(cap=MAX_USER_DATA)
    signature = r.take(SIGNATURE_LEN)
    return TransferOrder(
        sender=sender,
        sender_key=sender_key,
        recipient=Recipient(rkind, raddr),
        amount=amount,
        sequence=sequence,
        user_data=user_data,
        signature=signature,
    )


def _encode_signed_order(out: list, signed: SignedTransferOrder) -> None:
    _encode_order(out, signed.order)
    out.append(signed.authority)
    out.append(signed.authority_signature)


def _decode_signed_order(r: Reader) -> SignedTransferOrder:
    order = _decode_order(r)
    authority = r.take(KEY_LEN)
    sig = r.take(SIGNATURE_LEN)
    return SignedTransferOrder(order=order, authority=authority, authority_signature=sig)


def _encode_cert(out: list, cert: CertifiedTransfer) -> None:
    _encode_order(out, cert.order)
    out.append(struct.pack("<I", len(cert.signatures)))
    for name, sig in cert.signatures:
        out.append(name)
        out.append(sig)


def _decode_cert(r: Reader) -> CertifiedTransfer:
    order = _decode_order(r)
    count = r.u32()
    if count > MAX_SIGNATURES:
        raise MalformedMessage(f"{count} signatures exceeds cap")
    sigs = tuple((r.take(KEY_LEN), r.take(SIGNATURE_LEN)) for _ in range(count))
    return CertifiedTransfer(order=order, signatures=sigs)


def _encode_sync(out: list, sync: PrimarySynchronizationOrder) -> None:
    out.append(struct.pack("<Q", sync.transaction_index))
    out.append(sync.recipient)
    out.append(struct.pack("<Q", sync.amount))


def _decode_sync(r: Reader) -> PrimarySynchronizationOrder:
    index = r.u64()
    recipient = r.take(ADDRESS_LEN)
    amount = r.u64()
    return PrimarySynchronizationOrder(transaction_index=index, recipient=recipient, amount=amount)


def _encode_info_request(out: list, req: AccountInfoRequest) -> None:
    out.append(req.address)
    if req.confirmed_start is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        out.append(struct.pack("<QI", req.confirmed_start, req.confirmed_count))
    out.append(bytes([1 if req.include_received else 0, 1 if req.include_synchronized else 0]))


def _decode_info_request(r: Reader) -> AccountInfoRequest:
    address = r.take(ADDRESS_LEN)
    has_range = r.u8()
    if has_range not in (0, 1):
        raise MalformedMessage("bad option byte")
    start, count = (None, 0)
    if has_range:
        start = r.u64()
        count = r.u32()
    inc_recv = r.u8()
    inc_sync = r.u8()
    if inc_recv not in (0, 1) or inc_sync not in (0, 1):
        raise MalformedMessage("bad flag byte")
    return AccountInfoRequest(
        address=address,
        confirmed_start=start,
        confirmed_count=count,
        include_received=bool(inc_recv),
        include_synchronized=bool(inc_sync),
    )


def _encode_info_response(out: list, resp: AccountInfoResponse) -> None:
    out.append(resp.address)
    out.append(resp.balance.to_bytes(16, "little", signed=True))
    out.append(struct.pack("<Q", resp.next_sequence))
    if resp.pending is None:
        out.append(b"\x00")
    else:
        out.append(b"\x01")
        _encode_signed_order(out, resp.pending)
    for certs in (resp.confirmed, resp.received):
        out.append(struct.pack("<I", len(certs)))
        for cert in certs:
            _encode_cert(out, cert)
    out.append(struct.pack("<I", len(resp.synchronized)))
    for sync in resp.synchronized:
        _encode_sync(out, sync)


def _decode_info_response(r: Reader) -> AccountInfoResponse:
    address = r.take(ADDRESS_LEN)
    balance = r.i128()
    next_sequence = r.u64()
    has_pending = r.u8()
    if has_pending not in (0, 1):
        raise MalformedMessage("bad option byte")
    pending = _decode_signed_order(r) if has_pending else None
    lists = []
    for _ in range(2):
        count = r.u32()
        if count > MAX_CERTS_PER_RESPONSE:
            raise MalformedMessage(f"{count} certificates exceeds cap")
        lists.append(tuple(_decode_cert(r) for _ in range(count)))
    count = r.u32()
    if count > MAX_CERTS_PER_RESPONSE:
        raise MalformedMessage(f"{count} sync orders exceeds cap")
    synchronized = tuple(_decode_sync(r) for _ in range(count))
    return AccountInfoResponse(
        address=address,
        balance=balance,
        next_sequence=next_sequence,
        pending=pending,
        confirmed=lists[0],
        received=lists[1],
        synchronized=synchronized,
    )


TAG_NAMES = {
    TAG_TRANSFER_ORDER: "transfer-order",
    TAG_SIGNED_ORDER: "vote",
    TAG_CONFIRMATION: "confirmation",
    TAG_ACCOUNT_INFO_REQUEST: "account-info-request",
    TAG_ACCOUNT_INFO_RESPONSE: "account-info-response",
    TAG_CROSS_SHARD_COMMIT: "cross-shard-commit",
    TAG_PRIMARY_SYNC: "primary-sync",
    TAG_ERROR: "error",
    TAG_INTER_SHARD: "inter-shard",
    TAG_INTER_SHARD_ACK: "inter-shard-ack",
    TAG_CHUNK: "chunk",
    TAG_STATE_DUMP_REQUEST: "state-dump-request",
    TAG_STATE_DUMP_RESPONSE: "state-dump-response",
}


def tag_of(message: WireMessage) -> int:
    """Public alias for the frame tag of a message object."""
    return _tag_of(message)


def _tag_of(message: WireMessage) -> int:
    if isinstance(message, TransferOrder):
        return TAG_TRANSFER_ORDER
    if isinstance(message, SignedTransferOrder):
        return TAG_SIGNED_ORDER
    if isinstance(message, CertifiedTransfer):
        return TAG_CONFIRMATION
    if isinstance(message, AccountInfoRequest):
        return TAG_ACCOUNT_INFO_REQUEST
    if isinstance(message, AccountInfoResponse):
        return TAG_ACCOUNT_INFO_RESPONSE
    if isinstance(message, CrossShardUpdate):
        return TAG_CROSS_SHARD_COMMIT
    if isinstance(message, PrimarySynchronizationOrder):
        return TAG_PRIMARY_SYNC
    if isinstance(message, ErrorResponse):
        return TAG_ERROR
    if isinstance(message, InterShardEnvelope):
        return TAG_INTER_SHARD
    if isinstance(message, InterShardAck):
        return TAG_INTER_SHARD_ACK
    if isinstance(message, Chunk):
        return TAG_CHUNK
    if isinstance(message, StateDumpRequest):
        return TAG_STATE_DUMP_REQUEST
    if isinstance(message, StateDumpResponse):
        return TAG_STATE_DUMP_RESPONSE
    raise MalformedMessage(f"not a wire message: {type(message).__name__}")


def encode_message(message: WireMessage, nonce: int = 0) -> bytes:
    """Serialize `message` into a full frame with the given nonce."""
    tag = _tag_of(message)
    out: list = [bytes([PROTOCOL_VERSION, tag]), struct.pack("<Q", nonce)]
    if tag == TAG_TRANSFER_ORDER:
        _encode_order(out, message)
    elif tag == TAG_SIGNED_ORDER:
        _encode_signed_order(out, message)
    elif tag == TAG_CONFIRMATION:
        _encode_cert(out, message)
    elif tag == TAG_ACCOUNT_INFO_REQUEST:
        _encode_info_request(out, message)
    elif tag == TAG_ACCOUNT_INFO_RESPONSE:
        _encode_info_response(out, message)
    elif tag == TAG_CROSS_SHARD_COMMIT:
        out.append(struct.pack("<I", message.shard_id))
        _encode_cert(out, message.certificate)
    elif tag == TAG_PRIMARY_SYNC:
        _encode_sync(out, message)
    elif tag == TAG_ERROR:
        out.append(struct.pack("<H", message.code))
        _encode_bytes(out, message.detail.encode("utf-8"))
    elif tag == TAG_INTER_SHARD:
        out.append(struct.pack("<IIQ", message.source_shard, message.dest_shard, message.seq))
        _encode_bytes(out, message.payload)
        if len(message.mac) != MAC_LEN:
            raise MalformedMessage("bad MAC length")
        out.append(message.mac)
    elif tag == TAG_INTER_SHARD_ACK:
        out.append(struct.pack("<IIQ", message.source_shard, message.dest_shard, message.ack_seq))
        if len(message.mac) != MAC_LEN:
            raise MalformedMessage("bad MAC length")
        out.append(message.mac)
    elif tag == TAG_CHUNK:
        out.append(struct.pack("<HH", message.total, message.index))
        _encode_bytes(out, message.data)
    elif tag == TAG_STATE_DUMP_REQUEST:
        pass
    elif tag == TAG_STATE_DUMP_RESPONSE:
        _encode_bytes(out, message.data)
    return b"".join(out)


def decode_message(data: bytes) -> tuple[int, int, WireMessage]:
    """Parse a frame; returns (tag, nonce, message). Strict, no trailing bytes."""
    r = Reader(data)
    version = r.u8()
    if version != PROTOCOL_VERSION:
        raise MalformedMessage(f"unsupported protocol version {version}")
    tag = r.u8()
    nonce = r.u64()
    message: WireMessage
    if tag == TAG_TRANSFER_ORDER:
        message = _decode_order(r)
    elif tag == TAG_SIGNED_ORDER:
        message = _decode_signed_order(r)
    elif tag == TAG_CONFIRMATION:
        message = _decode_cert(r)
    elif tag == TAG_ACCOUNT_INFO_REQUEST:
        message = _decode_info_request(r)
    elif tag == TAG_ACCOUNT_INFO_RESPONSE:
        message = _decode_info_response(r)
    elif tag == TAG_CROSS_SHARD_COMMIT:
        shard_id = r.u32()
        message = CrossShardUpdate(shard_id=shard_id, certificate=_decode_cert(r))
    elif tag == TAG_PRIMARY_SYNC:
        message = _decode_sync(r)
    elif tag == TAG_ERROR:
        code = struct.unpack("<H", r.take(2))[0]
        detail = r.bytes_field(cap=4096).decode("utf-8", errors="replace")
        message = ErrorResponse(code=code, detail=detail)
    elif tag == TAG_INTER_SHARD:
        source, dest, seq = struct.unpack("<IIQ", r.take(16))
        payload = r.bytes_field()
        mac = r.take(MAC_LEN)
        message = InterShardEnvelope(source, dest, seq, payload, mac)
    elif tag == TAG_INTER_SHARD_ACK:
        source, dest, ack = struct.unpack("<IIQ", r.take(16))
        mac = r.take(MAC_LEN)
        message = InterShardAck(source, dest, ack, mac)
    elif tag == TAG_CHUNK:
        total, index = struct.unpack("<HH", r.take(4))
        message = Chunk(total=total, index=index, data=r.bytes_field())
    elif tag == TAG_STATE_DUMP_REQUEST:
        message = StateDumpRequest()
    elif tag == TAG_STATE_DUMP_RESPONSE:
        message = StateDumpResponse(data=r.bytes_field())
    else:
        raise MalformedMessage(f"unknown message tag {tag}")
    r.expect_end()
    return tag, nonce, message


def split_into_chunks(frame: bytes, nonce: int, budget: int = MTU) -> list[bytes]:
    """Wrap an over-MTU frame into chunk datagrams sharing the nonce.

    Frames already within budget are returned as-is (no chunk overhead).
    """
    if len(frame) <= budget:
        return [frame]
    # Per-chunk overhead: 10-byte header + 4-byte total/index + 4-byte length.
    room = budget - 18
    pieces = [frame[i : i + room] for i in range(0, len(frame), room)]
    if len(pieces) > 0xFFFF:
        raise MalformedMessage("response too large to chunk")
    return [
        encode_message(Chunk(total=len(pieces), index=i, data=piece), nonce)
        for i, piece in enumerate(pieces)
    ]


class ChunkAssembler:
    """Reassembles chunked responses, keyed by nonce on the caller's side."""

    def __init__(self):
        self.total: Optional[int] = None
        self.parts: dict[int, bytes] = {}

    def add(self, chunk: Chunk) -> Optional[bytes]:
        if chunk.total == 0 or chunk.index >= chunk.total:
            raise MalformedMessage("bad chunk header")
        if self.total is None:
            self.total = chunk.total
        elif self.total != chunk.total:
            raise MalformedMessage("inconsistent chunk totals")
        self.parts.setdefault(chunk.index, chunk.data)
        if len(self.parts) == self.total:
            return b"".join(self.parts[i] for i in range(self.total))
        return None
