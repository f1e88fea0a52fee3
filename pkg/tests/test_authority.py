"""Authority shard handlers: votes, settlement, cross-shard, funding, queries."""

import dataclasses
import itertools

import pytest

from conftest import make_committee, quorum_cert
from settlenet.authority import AuthorityState, parse_dump
from settlenet.committee import ShardAssignment
from settlenet.core import (
    AccountInfoRequest,
    PrimarySynchronizationOrder,
    Recipient,
    sign_transfer_order,
)
from settlenet.crypto import KeyPair
from settlenet.errors import (
    InsufficientFunds,
    InvalidAmount,
    InvalidSignature,
    MissingEarlierConfirmations,
    PreviousTransferPending,
    PrimaryRecipient,
    SyncOrderGap,
    UnexpectedSequence,
    UnknownAccount,
    UnknownSenderAccount,
    WrongShard,
)

AUTH_KEYS, COMMITTEE = make_committee(4)
X = KeyPair.from_seed(101)
Y = KeyPair.from_seed(102)
Z = KeyPair.from_seed(103)


def fresh_state(shard_id: int = 0, num_shards: int = 1, authority: int = 0) -> AuthorityState:
    return AuthorityState(AUTH_KEYS[authority], COMMITTEE, shard_id, num_shards)


def funded_state(owner: KeyPair = X, amount: int = 100) -> AuthorityState:
    state = fresh_state()
    state.handle_primary_synchronization_order(
        PrimarySynchronizationOrder(transaction_index=1, recipient=owner.address, amount=amount)
    )
    return state


def keypair_in_shard(shards: ShardAssignment, shard_id: int, start_seed: int = 2000) -> KeyPair:
    for seed in itertools.count(start_seed):
        kp = KeyPair.from_seed(seed)
        if shards.which_shard(kp.address) == shard_id:
            return kp
    raise AssertionError("unreachable")


def order_x_to_y(amount: int = 10, sequence: int = 0):
    return sign_transfer_order(X, Recipient.settlement(Y.address), amount, sequence)


class TestHandleTransferOrder:
    def test_funded_account_first_order_votes(self):
        state = funded_state()
        signed = state.handle_transfer_order(order_x_to_y())
        account = state.accounts[X.address]
        assert signed.authority == state.name
        assert account.pending == signed
        assert account.balance == 100
        assert account.next_sequence == 0

    def test_identical_resubmission_returns_same_vote_bytes(self):
        state = funded_state()
        first = state.handle_transfer_order(order_x_to_y())
        before = state.canonical_dump()
        again = state.handle_transfer_order(order_x_to_y())
        assert again == first
        assert state.canonical_dump() == before

    def test_conflicting_order_at_same_sequence_locked_out(self):
        state = funded_state()
        state.handle_transfer_order(order_x_to_y())
        other = sign_transfer_order(X, Recipient.settlement(Z.address), 5, 0)
        with pytest.raises(PreviousTransferPending):
            state.handle_transfer_order(other)

    def test_overspend_rejected(self):
        state = funded_state(amount=100)
        with pytest.raises(InsufficientFunds):
            state.handle_transfer_order(order_x_to_y(amount=150))

    def test_wrong_sequence_rejected(self):
        state = funded_state()
        with pytest.raises(UnexpectedSequence):
            state.handle_transfer_order(order_x_to_y(sequence=1))

    def test_unknown_sender_rejected(self):
        state = fresh_state()
        with pytest.raises(UnknownSenderAccount):
            state.handle_transfer_order(order_x_to_y())

    def test_zero_amount_rejected(self):
        state = funded_state()
        with pytest.raises(InvalidAmount):
            state.handle_transfer_order(order_x_to_y(amount=0))

    def test_wrong_shard_rejected(self):
        shards = ShardAssignment(2)
        sender = keypair_in_shard(shards, 0)
        state = fresh_state(shard_id=1, num_shards=2)
        order = sign_transfer_order(sender, Recipient.settlement(Y.address), 1, 0)
        with pytest.raises(WrongShard):
            state.handle_transfer_order(order)

    def test_tampered_signature_rejected_without_state_change(self):
        state = funded_state()
        order = order_x_to_y()
        tampered = dataclasses.replace(order, amount=order.amount + 1)
        before = state.canonical_dump()
        with pytest.raises(InvalidSignature):
            state.handle_transfer_order(tampered)
        assert state.canonical_dump() == before

    def test_balance_check_holds_at_signing_time(self):
        state = funded_state(amount=100)
        signed = state.handle_transfer_order(order_x_to_y(amount=100))
        assert signed.order.amount <= state.accounts[X.address].balance


class TestHandleConfirmationOrder:
    def test_same_shard_settlement_moves_funds(self):
        state = funded_state()
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order_x_to_y())
        state.handle_transfer_order(order_x_to_y())
        _resp, update = state.handle_confirmation_order(cert)
        assert update is None
        x_account = state.accounts[X.address]
        y_account = state.accounts[Y.address]
        assert x_account.balance == 90
        assert x_account.next_sequence == 1
        assert x_account.pending is None
        assert x_account.confirmed == [cert]
        assert y_account.balance == 10
        assert y_account.received == [cert]

    def test_replay_is_a_silent_no_op(self):
        state = funded_state()
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order_x_to_y())
        state.handle_confirmation_order(cert)
        before = state.canonical_dump()
        resp, update = state.handle_confirmation_order(cert)
        assert update is None
        assert resp.next_sequence == 1
        assert state.canonical_dump() == before

    def test_other_shard_recipient_returns_cross_shard_update(self):
        shards = ShardAssignment(8)
        sender = keypair_in_shard(shards, 0)
        target = keypair_in_shard(shards, 5)
        state = fresh_state(shard_id=0, num_shards=8)
        state.handle_primary_synchronization_order(
            PrimarySynchronizationOrder(transaction_index=1, recipient=sender.address, amount=50)
        )
        order = sign_transfer_order(sender, Recipient.settlement(target.address), 10, 0)
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order)
        _resp, update = state.handle_confirmation_order(cert)
        assert update is not None
        assert update.shard_id == 5
        assert update.certificate == cert
        assert state.accounts[sender.address].balance == 40
        assert target.address not in state.accounts

    def test_future_sequence_requires_earlier_confirmations(self):
        state = funded_state()
        cert = quorum_cert(
            AUTH_KEYS, COMMITTEE, sign_transfer_order(X, Recipient.settlement(Y.address), 10, 5)
        )
        with pytest.raises(MissingEarlierConfirmations):
            state.handle_confirmation_order(cert)

    def test_self_transfer_is_balance_neutral(self):
        state = funded_state()
        order = sign_transfer_order(X, Recipient.settlement(X.address), 10, 0)
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order)
        state.handle_confirmation_order(cert)
        account = state.accounts[X.address]
        assert account.balance == 100
        assert account.next_sequence == 1
        assert account.confirmed == [cert]
        assert account.received == [cert]

    def test_unfunded_authority_allows_negative_balance(self):
        # A valid certificate proves a quorum saw the funds; a lagging
        # authority must settle it even before its own funding arrives.
        state = fresh_state()
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order_x_to_y(amount=10))
        state.handle_confirmation_order(cert)
        assert state.accounts[X.address].balance == -10

    def test_primary_recipient_settles_without_local_credit(self):
        state = funded_state()
        order = sign_transfer_order(X, Recipient.primary(Z.address), 25, 0)
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order)
        _resp, update = state.handle_confirmation_order(cert)
        assert update is None
        assert state.accounts[X.address].balance == 75
        assert Z.address not in state.accounts

    def test_invalid_certificate_rejected(self):
        state = funded_state()
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order_x_to_y())
        short = dataclasses.replace(cert, signatures=cert.signatures[:2])
        before = state.canonical_dump()
        with pytest.raises(Exception):
            state.handle_confirmation_order(short)
        assert state.canonical_dump() == before


class TestHandleCrossShardCommit:
    def setup_method(self):
        self.shards = ShardAssignment(4)
        self.sender = keypair_in_shard(self.shards, 0, 3000)
        self.target = keypair_in_shard(self.shards, 2, 3100)
        self.state = fresh_state(shard_id=2, num_shards=4)
        order = sign_transfer_order(
            self.sender, Recipient.settlement(self.target.address), 10, 0
        )
        self.cert = quorum_cert(AUTH_KEYS, COMMITTEE, order)

    def test_credit_creates_absent_account(self):
        self.state.handle_cross_shard_commit(self.cert)
        account = self.state.accounts[self.target.address]
        assert account.balance == 10
        assert account.received == [self.cert]

    def test_duplicate_delivery_credits_once(self):
        self.state.handle_cross_shard_commit(self.cert)
        before = self.state.canonical_dump()
        self.state.handle_cross_shard_commit(self.cert)
        assert self.state.canonical_dump() == before
        assert self.state.accounts[self.target.address].balance == 10

    def test_primary_recipient_rejected(self):
        order = sign_transfer_order(self.sender, Recipient.primary(self.target.address), 10, 0)
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order)
        with pytest.raises(PrimaryRecipient):
            self.state.handle_cross_shard_commit(cert)

    def test_wrong_shard_rejected(self):
        other = keypair_in_shard(self.shards, 1, 3200)
        order = sign_transfer_order(self.sender, Recipient.settlement(other.address), 10, 0)
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order)
        with pytest.raises(WrongShard):
            self.state.handle_cross_shard_commit(cert)


class TestHandlePrimarySynchronizationOrder:
    def test_first_sync_funds_account(self):
        state = fresh_state()
        state.handle_primary_synchronization_order(
            PrimarySynchronizationOrder(transaction_index=1, recipient=X.address, amount=100)
        )
        assert state.accounts[X.address].balance == 100
        assert state.last_transaction == 1

    def test_replayed_sync_is_a_no_op(self):
        state = funded_state()
        before = state.canonical_dump()
        state.handle_primary_synchronization_order(
            PrimarySynchronizationOrder(transaction_index=1, recipient=X.address, amount=100)
        )
        assert state.canonical_dump() == before

    def test_gap_in_indices_rejected(self):
        state = funded_state()  # last_transaction == 1
        with pytest.raises(SyncOrderGap):
            state.handle_primary_synchronization_order(
                PrimarySynchronizationOrder(transaction_index=3, recipient=X.address, amount=1)
            )

    def test_contiguous_syncs_accumulate(self):
        state = funded_state()
        state.handle_primary_synchronization_order(
            PrimarySynchronizationOrder(transaction_index=2, recipient=X.address, amount=40)
        )
        assert state.accounts[X.address].balance == 140
        assert [s.transaction_index for s in state.accounts[X.address].synchronized] == [1, 2]


class TestHandleAccountInfoQuery:
    def test_query_after_settlement(self):
        state = funded_state()
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order_x_to_y())
        state.handle_confirmation_order(cert)
        resp = state.handle_account_info_query(AccountInfoRequest(address=X.address))
        assert resp.next_sequence == 1
        assert resp.balance == 90
        assert resp.pending is None

    def test_unknown_address_rejected(self):
        state = fresh_state()
        with pytest.raises(UnknownAccount):
            state.handle_account_info_query(AccountInfoRequest(address=X.address))

    def test_confirmed_range_returns_exactly_requested_slice(self):
        state = funded_state()
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order_x_to_y())
        state.handle_confirmation_order(cert)
        resp = state.handle_account_info_query(
            AccountInfoRequest(address=X.address, confirmed_start=0, confirmed_count=1)
        )
        assert resp.confirmed == (cert,)
        empty = state.handle_account_info_query(
            AccountInfoRequest(address=X.address, confirmed_start=1, confirmed_count=5)
        )
        assert empty.confirmed == ()

    def test_received_and_synchronized_logs_on_request(self):
        state = funded_state(owner=Y, amount=30)
        cert = quorum_cert(
            AUTH_KEYS, COMMITTEE, sign_transfer_order(X, Recipient.settlement(Y.address), 10, 0)
        )
        state.handle_confirmation_order(cert)
        resp = state.handle_account_info_query(
            AccountInfoRequest(
                address=Y.address, include_received=True, include_synchronized=True
            )
        )
        assert resp.received == (cert,)
        assert [s.transaction_index for s in resp.synchronized] == [1]
        assert resp.balance == 40


class TestSequenceDiscipline:
    def test_confirmed_log_is_contiguous_and_indexed_by_sequence(self):
        state = funded_state(amount=1000)
        for sequence in range(5):
            order = order_x_to_y(amount=7, sequence=sequence)
            state.handle_transfer_order(order)
            state.handle_confirmation_order(quorum_cert(AUTH_KEYS, COMMITTEE, order))
        account = state.accounts[X.address]
        assert account.next_sequence == 5
        assert [cert.order.sequence for cert in account.confirmed] == list(range(5))

    def test_same_shard_transfers_conserve_total_balance(self):
        state = funded_state(amount=1000)
        state.handle_primary_synchronization_order(
            PrimarySynchronizationOrder(transaction_index=2, recipient=Y.address, amount=500)
        )
        total = lambda: sum(acct.balance for acct in state.accounts.values())
        assert total() == 1500
        plan = [(X, Y, 10, 0), (Y, X, 200, 0), (X, Y, 30, 1), (X, X, 5, 2)]
        for sender, target, amount, sequence in plan:
            order = sign_transfer_order(
                sender, Recipient.settlement(target.address), amount, sequence
            )
            state.handle_confirmation_order(quorum_cert(AUTH_KEYS, COMMITTEE, order))
            assert total() == 1500


class TestIdempotencyAndDumps:
    def test_every_handler_is_idempotent_on_canonical_dumps(self):
        order = order_x_to_y()
        cert = quorum_cert(AUTH_KEYS, COMMITTEE, order)
        sync = PrimarySynchronizationOrder(
            transaction_index=2, recipient=Z.address, amount=11
        )
        apply_fns = {
            "transfer": lambda s: s.handle_transfer_order(order),
            "confirmation": lambda s: s.handle_confirmation_order(cert),
            "sync": lambda s: s.handle_primary_synchronization_order(sync),
            "query": lambda s: s.handle_account_info_query(
                AccountInfoRequest(address=X.address)
            ),
        }
        for name, apply in apply_fns.items():
            state = funded_state()
            apply(state)
            once = state.canonical_dump()
            apply(state)
            assert state.canonical_dump() == once, f"{name} handler is not idempotent"

    def test_dump_restores_to_identical_state_hash(self):
        state = funded_state()
        state.handle_transfer_order(order_x_to_y())
        dump = state.canonical_dump()
        restored = AuthorityState.restore_from_dump(AUTH_KEYS[0], COMMITTEE, dump)
        assert restored.state_hash() == state.state_hash()
        assert restored.canonical_dump() == dump

    def test_parse_dump_reads_header_and_accounts(self):
        state = funded_state()
        header, accounts = parse_dump(state.canonical_dump())
        assert len(accounts) == 1
        assert accounts[0][0] == X.address

    def test_state_hash_ignores_shard_identity_but_not_content(self):
        a = funded_state()
        b = funded_state()
        assert a.state_hash() == b.state_hash()
        b.handle_transfer_order(order_x_to_y())
        assert a.state_hash() != b.state_hash()
