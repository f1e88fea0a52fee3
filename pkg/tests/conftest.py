"""Shared fixtures: deterministic committees, port allocation, and the
acceptance-criteria summary printed at the end of a run."""

import contextlib
import itertools
import threading
from dataclasses import dataclass

import pytest

from settlenet.authority import AuthorityState
from settlenet.client import Client, ClientState
from settlenet.committee import AuthorityEntry, Committee, CommitteeConfig
from settlenet.core import (
    CertifiedTransfer,
    FundingTransaction,
    Recipient,
    aggregate_certificate,
    authority_sign_order,
)
from settlenet.crypto import KeyPair, deterministic_keypairs
from settlenet.network import LocalDeployment, ShardServer, channel_key_for
from settlenet.primary import PrimaryState

# -- Port allocation -------------------------------------------------------

# Tests that bind real sockets draw disjoint base-port blocks from here.
# An N=10 committee spans 64 * 10 ports, so blocks are 768 wide.
_PORT_LOCK = threading.Lock()
_PORT_COUNTER = itertools.count(0)


def next_base_port() -> int:
    with _PORT_LOCK:
        step = next(_PORT_COUNTER)
    return 20000 + (step * 768) % 44544


@pytest.fixture
def base_port() -> int:
    return next_base_port()


# -- Deterministic committees and deployments ------------------------------


def make_committee(n: int, namespace: str = "test-authority"):
    """N deterministic authority keypairs plus their committee."""
    keys = list(deterministic_keypairs(n, namespace))
    return keys, Committee(tuple(kp.public_bytes for kp in keys))


def make_config(
    n: int,
    shards: int = 1,
    namespace: str = "test-authority",
    base: int = 9000,
    host: str = "127.0.0.1",
):
    keys, _committee = make_committee(n, namespace)
    entries = tuple(
        AuthorityEntry(name=kp.public_bytes, host=host, base_port=base + 64 * i, num_shards=shards)
        for i, kp in enumerate(keys)
    )
    return keys, CommitteeConfig(entries)


@dataclass
class LocalFixture:
    """An in-process committee: states, routing, and the genesis ledger."""

    keys: list
    config: CommitteeConfig
    deployment: LocalDeployment
    primary: PrimaryState

    @property
    def committee(self):
        return self.config.committee

    def fund(self, address: bytes, amount: int):
        """Fund on the primary ledger and deliver to every live authority."""
        sync = self.primary.handle_funding_transaction(
            FundingTransaction(recipient=address, amount=amount)
        )
        self.deployment.broadcast_sync(sync)
        return sync

    def shard_states(self, name: bytes):
        return self.deployment.authority_shards(name)

    def all_states(self):
        return list(self.deployment.nodes.values())


def make_local(n: int = 4, shards: int = 1, namespace: str = "test-authority") -> LocalFixture:
    keys, config = make_config(n, shards, namespace)
    deployment = LocalDeployment(config, {kp.public_bytes: kp for kp in keys})
    primary = PrimaryState(config.committee)
    return LocalFixture(keys=keys, config=config, deployment=deployment, primary=primary)


@pytest.fixture
def local4() -> LocalFixture:
    return make_local(4)


@pytest.fixture
def client_factory():
    """Builds clients against a LocalFixture and closes their pools after."""
    created: list[Client] = []

    def build(local: LocalFixture, keypair: KeyPair, funding: int = 0, **kwargs) -> Client:
        state = ClientState(keypair=keypair)
        client = Client(state, local.config, local.deployment.transport, **kwargs)
        created.append(client)
        if funding:
            sync = local.fund(keypair.address, funding)
            client.receive_from_primary([sync])
        return client

    yield build
    for client in created:
        client.close()


# -- Real socket deployments -----------------------------------------------


@dataclass
class UdpCommittee:
    keys: list
    config: CommitteeConfig
    servers: list
    threads: list

    @property
    def committee(self):
        return self.config.committee

    def states_of(self, name: bytes):
        return [srv.state for srv in self.servers if srv.state.name == name]


@contextlib.contextmanager
def udp_committee(
    n: int = 4,
    shards: int = 1,
    base: int = None,
    namespace: str = "test-authority",
    genesis=(),
    poll_interval: float = 0.01,
):
    """Spin up one real ShardServer per (authority, shard) on loopback."""
    if base is None:
        base = next_base_port()
    keys, config = make_config(n, shards, namespace, base=base)
    genesis = list(genesis)
    servers, threads = [], []
    try:
        for kp, entry in zip(keys, config.entries):
            channel_key = channel_key_for(kp)
            for shard in range(shards):
                state = AuthorityState(kp, config.committee, shard, shards)
                for sync in genesis:
                    state.handle_primary_synchronization_order(sync)
                server = ShardServer(state, entry, channel_key, poll_interval=poll_interval)
                thread = threading.Thread(target=server.serve_forever, daemon=True)
                thread.start()
                servers.append(server)
                threads.append(thread)
        for server in servers:
            if not server.ready_event.wait(5.0):
                raise RuntimeError(f"server on {server.endpoint} failed to start")
        yield UdpCommittee(keys=keys, config=config, servers=servers, threads=threads)
    finally:
        for server in servers:
            server.stop()
        for thread in threads:
            thread.join(timeout=5.0)


# -- Certificate builders --------------------------------------------------


def quorum_cert(keys, committee: Committee, order, signers=None) -> CertifiedTransfer:
    """Certificate signed by `signers` (defaults to the first 2f+1 keys)."""
    if signers is None:
        signers = keys[: committee.quorum_threshold()]
    votes = [authority_sign_order(kp, order) for kp in signers]
    return aggregate_certificate(committee, order, votes)


def handmade_cert(keys, order, names_and_sigs=None) -> CertifiedTransfer:
    """Certificate assembled without aggregate_certificate's checks."""
    if names_and_sigs is None:
        names_and_sigs = [
            (kp.public_bytes, authority_sign_order(kp, order).authority_signature)
            for kp in keys
        ]
    return CertifiedTransfer(order=order, signatures=tuple(names_and_sigs))


def settlement(address: bytes) -> Recipient:
    return Recipient.settlement(address)


# -- Acceptance criteria reporting -----------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


class _Criterion:
    """Records one acceptance criterion outcome for the end-of-run summary."""

    def __init__(self, num: int, title: str):
        self.num = num
        self.title = title
        self._outcome = None

    def result(self, ok: bool, detail: str = ""):
        self._outcome = ("PASS" if ok else "FAIL", detail)
        assert ok, f"C{self.num} {self.title}: {detail}"

    def __enter__(self):
        return self

    def __exit__(self, etype, exc, tb):
        if etype is not None and etype.__name__ == "Skipped":
            _CRITERIA[self.num] = (self.title, "SKIP", str(exc))
        elif etype is not None and self._outcome is None:
            _CRITERIA[self.num] = (self.title, "FAIL", f"{etype.__name__}: {exc}")
        elif self._outcome is None:
            _CRITERIA[self.num] = (self.title, "FAIL", "no result recorded")
        else:
            _CRITERIA[self.num] = (self.title, *self._outcome)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[num]
        line = f"C{num} {title}: {status}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
