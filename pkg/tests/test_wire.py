"""Canonical serialization: roundtrips, strict rejects, pinned vectors."""

import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_committee, quorum_cert
from settlenet import wire
from settlenet.core import (
    AccountInfoRequest,
    AccountInfoResponse,
    CrossShardUpdate,
    ErrorResponse,
    PrimarySynchronizationOrder,
    Recipient,
    authority_sign_order,
    sign_transfer_order,
)
from settlenet.crypto import KeyPair, deterministic_keypairs
from settlenet.errors import MalformedMessage

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_messages() -> dict[str, object]:
    """Deterministic one-of-each wire messages; pinned in wire_vectors.json."""
    keys, committee = make_committee(4, "wire-fixture-authority")
    sender = KeyPair.from_seed(4001)
    target = KeyPair.from_seed(4002)
    order = sign_transfer_order(
        sender, Recipient.settlement(target.address), 125, 3, user_data=b"memo"
    )
    primary_order = sign_transfer_order(sender, Recipient.primary(target.address), 7, 4)
    vote = authority_sign_order(keys[0], order)
    cert = quorum_cert(keys, committee, order)
    sync = PrimarySynchronizationOrder(transaction_index=2, recipient=sender.address, amount=900)
    return {
        "transfer_order": order,
        "primary_transfer_order": primary_order,
        "signed_order": vote,
        "certificate": cert,
        "account_info_request": AccountInfoRequest(
            address=sender.address,
            confirmed_start=1,
            confirmed_count=2,
            include_received=True,
            include_synchronized=True,
        ),
        "account_info_response": AccountInfoResponse(
            address=sender.address,
            balance=-35,
            next_sequence=4,
            pending=vote,
            confirmed=(cert,),
            received=(cert,),
            synchronized=(sync,),
        ),
        "cross_shard_update": CrossShardUpdate(shard_id=5, certificate=cert),
        "primary_sync": sync,
        "error_response": ErrorResponse(code=7, detail="wrong shard"),
        "inter_shard_envelope": wire.InterShardEnvelope(
            source_shard=1, dest_shard=2, seq=9, payload=b"payload", mac=bytes(range(16))
        ),
        "inter_shard_ack": wire.InterShardAck(
            source_shard=2, dest_shard=1, ack_seq=9, mac=bytes(range(16))
        ),
        "chunk": wire.Chunk(total=3, index=1, data=b"fragment"),
        "state_dump_request": wire.StateDumpRequest(),
        "state_dump_response": wire.StateDumpResponse(data=b"dump-bytes"),
    }


class TestRoundtrips:
    @pytest.mark.parametrize("name", sorted(fixture_messages()))
    def test_each_variant_roundtrips(self, name):
        message = fixture_messages()[name]
        frame = wire.encode_message(message, nonce=77)
        tag, nonce, decoded = wire.decode_message(frame)
        assert nonce == 77
        assert tag == wire.tag_of(message)
        assert decoded == message

    def test_nonce_zero_default(self):
        frame = wire.encode_message(ErrorResponse(code=1, detail=""))
        assert wire.decode_message(frame)[1] == 0


class TestPinnedVectors:
    """The committed hex vectors freeze the wire format across releases."""

    def test_vectors_file_matches_encoders(self):
        doc = json.loads((FIXTURES / "wire_vectors.json").read_text())
        messages = fixture_messages()
        assert set(doc["frames"]) == set(messages)
        for name, expected_hex in doc["frames"].items():
            frame = wire.encode_message(messages[name], nonce=doc["nonce"])
            assert frame.hex() == expected_hex, f"encoding drifted for {name}"

    def test_vectors_file_decodes_to_messages(self):
        doc = json.loads((FIXTURES / "wire_vectors.json").read_text())
        messages = fixture_messages()
        for name, frame_hex in doc["frames"].items():
            tag, nonce, decoded = wire.decode_message(bytes.fromhex(frame_hex))
            assert nonce == doc["nonce"]
            assert decoded == messages[name], f"decoding drifted for {name}"


class TestStrictDecoding:
    def test_empty_input_rejected(self):
        with pytest.raises(MalformedMessage):
            wire.decode_message(b"")

    def test_unknown_tag_rejected(self):
        frame = bytearray(wire.encode_message(ErrorResponse(code=1)))
        frame[1] = 250
        with pytest.raises(MalformedMessage):
            wire.decode_message(bytes(frame))

    def test_wrong_version_rejected(self):
        frame = bytearray(wire.encode_message(ErrorResponse(code=1)))
        frame[0] ^= 0xFF
        with pytest.raises(MalformedMessage):
            wire.decode_message(bytes(frame))

    def test_trailing_bytes_rejected(self):
        frame = wire.encode_message(ErrorResponse(code=1, detail="x"))
        with pytest.raises(MalformedMessage):
            wire.decode_message(frame + b"\x00")

    @pytest.mark.parametrize("name", ["transfer_order", "certificate", "account_info_response"])
    def test_every_truncation_rejected(self, name):
        frame = wire.encode_message(fixture_messages()[name], nonce=1)
        for cut in range(len(frame)):
            with pytest.raises(MalformedMessage):
                wire.decode_message(frame[:cut])


class TestChunking:
    def test_oversized_frame_splits_and_reassembles(self):
        frame = wire.encode_message(wire.StateDumpResponse(data=b"z" * 5000), nonce=3)
        chunks = wire.split_into_chunks(frame, nonce=3)
        assert len(chunks) > 1
        assert all(len(chunk) <= wire.MTU for chunk in chunks)
        assembler = wire.ChunkAssembler()
        outcome = None
        for chunk in chunks:
            _, _, decoded = wire.decode_message(chunk)
            outcome = assembler.add(decoded)
        assert outcome == frame

    def test_reassembly_tolerates_duplicates_and_reorder(self):
        frame = wire.encode_message(wire.StateDumpResponse(data=b"z" * 4000), nonce=3)
        chunks = [wire.decode_message(c)[2] for c in wire.split_into_chunks(frame, nonce=3)]
        assembler = wire.ChunkAssembler()
        sequence = [chunks[-1]] + chunks + [chunks[0]]
        results = [assembler.add(chunk) for chunk in sequence]
        assert results[-1] == frame or frame in results


@settings(max_examples=40, deadline=None)
@given(
    amount=st.integers(min_value=1, max_value=2**64 - 1),
    sequence=st.integers(min_value=0, max_value=2**64 - 1),
    user_data=st.binary(max_size=128),
    nonce=st.integers(min_value=0, max_value=2**64 - 1),
    to_primary=st.booleans(),
)
def test_arbitrary_orders_roundtrip(amount, sequence, user_data, nonce, to_primary):
    sender = KeyPair.from_seed(500)
    target = KeyPair.from_seed(501)
    recipient = (
        Recipient.primary(target.address) if to_primary else Recipient.settlement(target.address)
    )
    order = sign_transfer_order(sender, recipient, amount, sequence, user_data=user_data)
    tag, decoded_nonce, decoded = wire.decode_message(wire.encode_message(order, nonce=nonce))
    assert (tag, decoded_nonce, decoded) == (wire.TAG_TRANSFER_ORDER, nonce, order)


@settings(max_examples=30, deadline=None)
@given(data=st.binary(min_size=0, max_size=200))
def test_random_bytes_never_crash_the_decoder(data):
    try:
        wire.decode_message(data)
    except MalformedMessage:
        pass
