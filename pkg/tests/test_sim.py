"""Virtual-time simulation: determinism, fault menu, invariant oracle."""

import dataclasses

import pytest

from settlenet.core import Recipient
from settlenet.sim import (
    CHECK_NAMES,
    Behavior,
    NetworkModel,
    SimConfig,
    TraceEvent,
    all_checks_pass,
    check_invariants,
    equivocation_scenario,
    run_simulation,
)
from settlenet.wire import TAG_CONFIRMATION

SAFETY_CHECKS = tuple(name for name in CHECK_NAMES if name != "operation_liveness")


def failing_checks(results) -> list[str]:
    return [name for name, result in results.items() if not result.ok]


class TestDeterminism:
    def test_same_seed_yields_identical_traces(self):
        config = SimConfig(seed=42, operations=80, accounts=5)
        first = run_simulation(config)
        second = run_simulation(config)
        assert first.fingerprint() == second.fingerprint()
        assert first.lines() == second.lines()

    def test_determinism_holds_under_loss_and_faults(self):
        config = SimConfig(
            seed=7,
            operations=60,
            behaviors={1: Behavior.SIGN_ANYTHING},
            network=NetworkModel(drop_rate=0.15),
        )
        assert run_simulation(config).fingerprint() == run_simulation(config).fingerprint()

    def test_different_seeds_diverge(self):
        base = SimConfig(seed=1, operations=40)
        other = dataclasses.replace(base, seed=2)
        assert run_simulation(base).fingerprint() != run_simulation(other).fingerprint()

    def test_config_roundtrips_through_files(self, tmp_path):
        config = SimConfig(
            seed=9,
            operations=25,
            behaviors={0: Behavior.CRASHED, 2: Behavior.EQUIVOCATE},
            network=NetworkModel(min_delay_us=100, max_delay_us=900, drop_rate=0.1),
        )
        path = tmp_path / "run.json"
        config.to_file(path)
        assert SimConfig.from_file(path) == config


class TestFaultTolerance:
    def test_one_crashed_authority_all_operations_complete(self):
        config = SimConfig(
            seed=11, operations=100, behaviors={2: Behavior.CRASHED}, accounts=6
        )
        trace = run_simulation(config)
        assert trace.stats["ops_completed"] == trace.stats["ops_started"]
        assert trace.stats["ops_failed"] == 0
        assert len(trace.certificates) > 0
        results = check_invariants(trace)
        assert not failing_checks(results), failing_checks(results)

    def test_two_crashed_authorities_record_quorum_failures(self):
        config = SimConfig(
            seed=12,
            operations=12,
            behaviors={0: Behavior.CRASHED, 1: Behavior.CRASHED},
            accounts=3,
        )
        trace = run_simulation(config)
        assert trace.stats["ops_failed"] > 0
        assert any(event.kind == "op-failed" for event in trace.events)
        results = check_invariants(trace)
        # Liveness is lost beyond f crashes; safety must survive anyway.
        assert set(failing_checks(results)) <= {"operation_liveness"}

    def test_stonewall_within_f_keeps_liveness(self):
        config = SimConfig(seed=13, operations=40, behaviors={3: Behavior.STONEWALL})
        trace = run_simulation(config)
        assert trace.stats["ops_failed"] == 0
        assert not failing_checks(check_invariants(trace))


class TestInvariantOracle:
    def test_honest_thousand_operation_trace_passes_all_checks(self):
        config = SimConfig(seed=100, operations=1000, accounts=8)
        trace = run_simulation(config)
        results = check_invariants(trace)
        assert set(results) == set(CHECK_NAMES)
        assert all_checks_pass(results), failing_checks(results)
        assert any(event.kind == "quiescent" for event in trace.events)

    def test_sign_anything_authority_cannot_break_safety(self):
        config = SimConfig(
            seed=101, operations=300, behaviors={1: Behavior.SIGN_ANYTHING}, accounts=6
        )
        results = check_invariants(run_simulation(config))
        assert not failing_checks(results), failing_checks(results)

    def test_report_zero_sequence_authority_cannot_break_safety(self):
        config = SimConfig(
            seed=102, operations=200, behaviors={0: Behavior.REPORT_ZERO_SEQUENCE}
        )
        trace = run_simulation(config)
        assert trace.stats["ops_failed"] == 0
        assert not failing_checks(check_invariants(trace))

    def test_multi_shard_runs_deliver_cross_shard_exactly_once(self):
        config = SimConfig(
            seed=103,
            operations=200,
            shards_per_authority=3,
            accounts=8,
            network=NetworkModel(drop_rate=0.1),
        )
        trace = run_simulation(config)
        results = check_invariants(trace)
        assert not failing_checks(results), failing_checks(results)

    def test_forged_double_confirmation_caught_by_uniqueness_check(self):
        # Oracle self-test: a trace where some authority reports two
        # conflicting certificates at one sequence must fail verification.
        config = SimConfig(seed=104, operations=30, accounts=3)
        trace = run_simulation(config)
        assert check_invariants(trace)["certificate_uniqueness"].ok
        (sender, sequence), cert = sorted(
            trace.certificates.items(), key=lambda kv: (kv[0][1], kv[0][0])
        )[0]
        hijacked = Recipient.settlement(trace.client_addresses[-1])
        if cert.order.recipient == hijacked:
            hijacked = Recipient.settlement(trace.client_addresses[0])
        forged_order = dataclasses.replace(cert.order, recipient=hijacked)
        forged = dataclasses.replace(cert, order=forged_order)
        trace.events.append(
            TraceEvent(
                index=len(trace.events),
                time_us=trace.events[-1].time_us + 1,
                kind="deliver",
                actor="a0/s0",
                tag=TAG_CONFIRMATION,
                payload=forged,
            )
        )
        results = check_invariants(trace)
        assert results["certificate_uniqueness"].ok is False

    def test_honest_clients_never_sign_two_orders_at_one_sequence(self):
        config = SimConfig(seed=105, operations=300, accounts=6)
        trace = run_simulation(config)
        seen: dict[tuple[bytes, int], set[bytes]] = {}
        for event in trace.events:
            if event.kind == "cert":
                order = event.payload.order
                seen.setdefault((order.sender, order.sequence), set()).add(order.digest())
        assert seen
        assert all(len(digests) == 1 for digests in seen.values())


class TestEquivocationScenario:
    def test_honest_committee_exhaustive_splits(self):
        outcomes = equivocation_scenario(4)
        assert len(outcomes) == 16
        for outcome in outcomes:
            assert not (outcome.certified_first and outcome.certified_second)
            assert outcome.locks_held and outcome.revotes_stable
            if {outcome.votes_first, outcome.votes_second} == {2}:
                assert outcome.locked
                assert not outcome.certified_first and not outcome.certified_second
            if outcome.votes_first >= 3:
                assert outcome.certified_first and not outcome.certified_second
            if outcome.votes_second >= 3:
                assert outcome.certified_second and not outcome.certified_first

    def test_even_split_locks_the_account(self):
        outcomes = equivocation_scenario(4)
        locked = [o for o in outcomes if o.locked]
        assert locked and all(o.votes_first == o.votes_second == 2 for o in locked)

    def test_double_signing_authority_cannot_certify_both(self):
        outcomes = equivocation_scenario(4, byzantine_double_signer=True)
        assert len(outcomes) == 8
        for outcome in outcomes:
            assert outcome.byzantine_double_signer
            assert not (outcome.certified_first and outcome.certified_second)
