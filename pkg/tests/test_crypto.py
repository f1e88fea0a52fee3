"""Address derivation, order signing, and signature verification."""

import dataclasses

import pytest

from settlenet import crypto
from settlenet.core import (
    Recipient,
    sign_transfer_order,
    verify_order_signature,
)
from settlenet.crypto import KeyPair, derive_address, deterministic_keypairs
from settlenet.errors import InvalidSignature, MalformedMessage


@pytest.fixture
def key_x() -> KeyPair:
    return KeyPair.from_seed(1)


@pytest.fixture
def key_y() -> KeyPair:
    return KeyPair.from_seed(2)


class TestDeriveAddress:
    def test_repeated_calls_agree(self, key_x):
        assert derive_address(key_x.public_bytes) == derive_address(key_x.public_bytes)
        assert key_x.address == derive_address(key_x.public_bytes)

    def test_distinct_keys_distinct_addresses(self, key_x, key_y):
        assert key_x.address != key_y.address

    def test_short_input_rejected(self):
        with pytest.raises(MalformedMessage):
            derive_address(b"\x00" * 31)

    def test_address_is_32_bytes(self, key_x):
        assert len(key_x.address) == crypto.ADDRESS_LEN


class TestSignTransferOrder:
    def test_signed_order_verifies(self, key_x, key_y):
        order = sign_transfer_order(key_x, Recipient.settlement(key_y.address), 10, 0)
        assert order.sender == key_x.address
        verify_order_signature(order)

    def test_signing_is_deterministic(self, key_x, key_y):
        recipient = Recipient.settlement(key_y.address)
        first = sign_transfer_order(key_x, recipient, 10, 0)
        second = sign_transfer_order(key_x, recipient, 10, 0)
        assert first == second
        assert first.signed_bytes() == second.signed_bytes()

    def test_sender_field_must_match_key(self, key_x, key_y):
        order = sign_transfer_order(key_x, Recipient.settlement(key_y.address), 10, 0)
        with pytest.raises((InvalidSignature, MalformedMessage)):
            forged = dataclasses.replace(order, sender=key_y.address)
            verify_order_signature(forged)

    def test_same_bytes_same_signature(self, key_x):
        assert key_x.sign(b"d:", b"hello") == key_x.sign(b"d:", b"hello")


class TestVerifyOrderSignature:
    def test_well_signed_order_ok(self, key_x, key_y):
        order = sign_transfer_order(key_x, Recipient.settlement(key_y.address), 10, 0)
        verify_order_signature(order)

    def test_flipped_amount_bit_rejected(self, key_x, key_y):
        order = sign_transfer_order(key_x, Recipient.settlement(key_y.address), 10, 0)
        tampered = dataclasses.replace(order, amount=order.amount ^ 1)
        with pytest.raises(InvalidSignature):
            verify_order_signature(tampered)

    def test_flipped_signature_bit_rejected(self, key_x, key_y):
        order = sign_transfer_order(key_x, Recipient.settlement(key_y.address), 10, 0)
        sig = bytearray(order.signature)
        sig[0] ^= 1
        tampered = dataclasses.replace(order, signature=bytes(sig))
        with pytest.raises(InvalidSignature):
            verify_order_signature(tampered)

    def test_domain_separation(self, key_x):
        sig = key_x.sign(crypto.TAG_ORDER, b"payload")
        crypto.verify(key_x.public_bytes, crypto.TAG_ORDER, b"payload", sig)
        with pytest.raises(InvalidSignature):
            crypto.verify(key_x.public_bytes, crypto.TAG_VOTE, b"payload", sig)


class TestBatchVerify:
    def test_all_good_batch_passes(self, key_x, key_y):
        items = [
            (key_x.public_bytes, b"a:", bytes([i]), key_x.sign(b"a:", bytes([i])))
            for i in range(5)
        ]
        crypto.verify_batch(items)

    def test_one_bad_item_fails_batch(self, key_x):
        good = key_x.sign(b"a:", b"0")
        bad = bytes(64)
        with pytest.raises(InvalidSignature):
            crypto.verify_batch(
                [(key_x.public_bytes, b"a:", b"0", good), (key_x.public_bytes, b"a:", b"1", bad)]
            )


class TestVerificationCache:
    def test_cache_hits_accumulate(self, key_x):
        crypto.clear_cache()
        sig = key_x.sign(b"d:", b"m")
        crypto.verify(key_x.public_bytes, b"d:", b"m", sig)
        crypto.verify(key_x.public_bytes, b"d:", b"m", sig)
        hits, misses = crypto.cache_stats()
        assert hits >= 1 and misses >= 1

    def test_clear_resets_counts(self, key_x):
        sig = key_x.sign(b"d:", b"m")
        crypto.verify(key_x.public_bytes, b"d:", b"m", sig)
        crypto.clear_cache()
        assert crypto.cache_stats() == (0, 0)

    def test_negative_result_cached_not_accepted(self, key_x):
        crypto.clear_cache()
        for _ in range(2):
            with pytest.raises(InvalidSignature):
                crypto.verify(key_x.public_bytes, b"d:", b"m", bytes(64))


class TestDeterministicKeypairs:
    def test_same_namespace_same_keys(self):
        a = deterministic_keypairs(3, "ns")
        b = deterministic_keypairs(3, "ns")
        assert [kp.secret_bytes for kp in a] == [kp.secret_bytes for kp in b]

    def test_namespaces_are_disjoint(self):
        a = deterministic_keypairs(2, "ns-one")
        b = deterministic_keypairs(2, "ns-two")
        assert {kp.address for kp in a}.isdisjoint({kp.address for kp in b})

    def test_prefix_stability(self):
        assert [
            kp.secret_bytes for kp in deterministic_keypairs(2, "ns")
        ] == [kp.secret_bytes for kp in deterministic_keypairs(5, "ns")][:2]
