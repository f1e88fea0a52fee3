"""Command line: every subcommand exercised in-process, plus real
authority server processes driven over loopback for the operator flow."""

import json
import queue
import signal
import stat
import subprocess
import sys
import threading
import time
from pathlib import Path

import pytest

from conftest import make_local, next_base_port, quorum_cert, settlement
from settlenet.cli import CommandError, load_key_file, main, write_key_file
from settlenet.committee import load_committee_file
from settlenet.core import sign_transfer_order
from settlenet.crypto import KeyPair

BOOTSTRAP = "import sys; from settlenet.cli import main; sys.exit(main())"


# -- In-process helpers ----------------------------------------------------


def run_cli(*args) -> int:
    return main([str(a) for a in args])


def keygen(tmp_path: Path, count: int, seed: int, prefix: str = "authority") -> Path:
    out = tmp_path / f"keys-{prefix}-{seed}"
    assert run_cli("keygen", "--out", out, "--count", count, "--seed", seed, "--prefix", prefix) == 0
    return out


def make_committee_file(tmp_path: Path, keys_dir: Path, base_port: int, shards: int = 1) -> Path:
    out = tmp_path / "committee.json"
    assert (
        run_cli(
            "committee",
            "--keys", keys_dir,
            "--out", out,
            "--base-port", base_port,
            "--shards", shards,
        )
        == 0
    )
    return out


# -- keygen ----------------------------------------------------------------


def test_keygen_writes_private_key_files(tmp_path, capsys):
    out = keygen(tmp_path, count=2, seed=7)
    files = sorted(out.glob("*.key"))
    assert [f.name for f in files] == ["authority-0.key", "authority-1.key"]
    for path in files:
        assert stat.S_IMODE(path.stat().st_mode) == 0o600
        doc = json.loads(path.read_text())
        assert doc["format"] == "settlenet-key-1"
        assert len(doc["secret"]) == 64
    assert "wrote" in capsys.readouterr().out


def test_keygen_seed_is_reproducible(tmp_path):
    assert run_cli("keygen", "--out", tmp_path / "one", "--count", 2, "--seed", 9) == 0
    assert run_cli("keygen", "--out", tmp_path / "two", "--count", 2, "--seed", 9) == 0
    for name in ("authority-0.key", "authority-1.key"):
        assert (tmp_path / "one" / name).read_text() == (tmp_path / "two" / name).read_text()


def test_keygen_without_seed_is_random(tmp_path):
    assert run_cli("keygen", "--out", tmp_path / "r1", "--count", 1) == 0
    assert run_cli("keygen", "--out", tmp_path / "r2", "--count", 1) == 0
    one = json.loads((tmp_path / "r1" / "authority-0.key").read_text())
    two = json.loads((tmp_path / "r2" / "authority-0.key").read_text())
    assert one["secret"] != two["secret"]


def test_key_file_roundtrip_and_tamper(tmp_path):
    keypair = KeyPair.from_seed(123)
    path = tmp_path / "k.key"
    write_key_file(path, keypair)
    assert load_key_file(path).public_bytes == keypair.public_bytes

    doc = json.loads(path.read_text())
    doc["public"] = KeyPair.from_seed(124).public_bytes.hex()
    path.write_text(json.dumps(doc))
    with pytest.raises(CommandError):
        load_key_file(path)


# -- committee -------------------------------------------------------------


def test_committee_file_from_key_files(tmp_path, capsys):
    keys_dir = keygen(tmp_path, count=4, seed=11)
    committee_path = make_committee_file(tmp_path, keys_dir, base_port=9700)
    out = capsys.readouterr().out
    assert "4 authorities" in out
    assert "quorum 3" in out

    config = load_committee_file(committee_path)
    assert len(config.entries) == 4
    assert [e.base_port for e in config.entries] == [9700, 9764, 9828, 9892]


def test_committee_rejects_wrong_size(tmp_path, capsys):
    keys_dir = keygen(tmp_path, count=5, seed=12)
    rc = run_cli("committee", "--keys", keys_dir, "--out", tmp_path / "c.json")
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_committee_requires_key_files(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run_cli("committee", "--keys", empty, "--out", tmp_path / "c.json") == 1
    assert "no *.key files" in capsys.readouterr().err


# -- microbench ------------------------------------------------------------


def test_microbench_prints_six_rows(capsys):
    assert run_cli("microbench", "--runs", 30, "--committee", 10) == 0
    out = capsys.readouterr().out
    assert "10-authority committee" in out
    for op in (
        "create-transfer-order",
        "check-transfer-order",
        "create-vote",
        "check-vote",
        "create-certificate",
        "check-certificate",
    ):
        assert op in out


def test_microbench_rejects_zero_runs(capsys):
    assert run_cli("microbench", "--runs", 0) == 1
    assert "error:" in capsys.readouterr().err


# -- bench -----------------------------------------------------------------


def test_bench_local_smoke_with_csv(tmp_path, capsys):
    csv_path = tmp_path / "bench.csv"
    args = (
        "bench", "--local", "--committee", 4,
        "--phase", "transfer-orders",
        "--load", 150, "--in-flight", 30,
        "--base-port", next_base_port(),
        "--csv-out", csv_path,
    )
    assert run_cli(*args) == 0
    out = capsys.readouterr().out
    assert "tx/s" in out
    assert "post-run audit: PASS" in out

    assert run_cli(*args[:-2], "--csv-out", csv_path) == 0
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("phase,shards,authorities")
    assert len(lines) == 3  # one header, two appended rows


def test_bench_rejects_bad_window(capsys):
    assert run_cli("bench", "--local", "--load", 5, "--in-flight", 50) == 1
    assert "error:" in capsys.readouterr().err


def test_bench_local_takes_size_not_file(tmp_path, capsys):
    assert run_cli("bench", "--local", "--committee", tmp_path / "nope.json") == 1
    assert "committee size" in capsys.readouterr().err


# -- audit -----------------------------------------------------------------


@pytest.fixture
def audited_world(tmp_path):
    """Committee file, dump directory, and primary snapshot on disk."""
    local = make_local(4, namespace="cli-audit")
    alice, bob = KeyPair.from_seed(901), KeyPair.from_seed(902)
    local.fund(alice.address, 100)
    order = sign_transfer_order(alice, settlement(bob.address), 10, 0)
    cert = quorum_cert(local.keys, local.committee, order)
    for state in local.all_states():
        state.handle_confirmation_order(cert)

    from settlenet.committee import save_committee_file

    committee_path = tmp_path / "committee.json"
    save_committee_file(committee_path, local.config)
    dumps_dir = tmp_path / "dumps"
    dumps_dir.mkdir()
    for (name, shard), state in local.deployment.nodes.items():
        (dumps_dir / f"{name.hex()[:8]}-{shard}.dump").write_bytes(state.canonical_dump())
    primary_path = tmp_path / "primary.json"
    local.primary.save_snapshot(primary_path)
    return committee_path, dumps_dir, primary_path


def test_audit_passes_on_honest_dumps(audited_world, tmp_path, capsys):
    committee_path, dumps_dir, primary_path = audited_world
    report_path = tmp_path / "report.json"
    rc = run_cli(
        "audit",
        "--committee", committee_path,
        "--dumps", dumps_dir,
        "--primary", primary_path,
        "--report", report_path,
    )
    assert rc == 0
    assert "audit: PASS" in capsys.readouterr().out
    report = json.loads(report_path.read_text())
    assert report["ok"] is True
    assert report["shards_audited"] == 4


def test_audit_fails_on_corrupted_dump(audited_world, capsys):
    committee_path, dumps_dir, primary_path = audited_world
    victim = sorted(dumps_dir.glob("*.dump"))[0]
    victim.write_bytes(victim.read_bytes()[:40])
    rc = run_cli(
        "audit", "--committee", committee_path, "--dumps", dumps_dir, "--primary", primary_path
    )
    assert rc == 1
    out = capsys.readouterr().out
    assert "audit: FAIL" in out
    assert "parse-error" in out


def test_audit_requires_dumps(audited_world, tmp_path, capsys):
    committee_path, _dumps, _primary = audited_world
    empty = tmp_path / "no-dumps"
    empty.mkdir()
    assert run_cli("audit", "--committee", committee_path, "--dumps", empty) == 1
    assert "no *.dump files" in capsys.readouterr().err


# -- Authority server processes --------------------------------------------


class CliProcess:
    """A settlenet subcommand in a child process with line-buffered output."""

    def __init__(self, *args):
        self.proc = subprocess.Popen(
            [sys.executable, "-c", BOOTSTRAP, *[str(a) for a in args]],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
            bufsize=1,
        )
        self.lines: "queue.Queue[str]" = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self):
        for line in self.proc.stdout:
            self.lines.put(line.rstrip("\n"))

    def expect(self, needle: str, timeout: float = 25.0) -> str:
        deadline = time.monotonic() + timeout
        seen = []
        while time.monotonic() < deadline:
            try:
                line = self.lines.get(timeout=0.2)
            except queue.Empty:
                if self.proc.poll() is not None and self.lines.empty():
                    break
                continue
            seen.append(line)
            if needle in line:
                return line
        raise AssertionError(f"never saw {needle!r}; output so far: {seen}")

    def terminate(self, timeout: float = 10.0) -> int:
        self.proc.send_signal(signal.SIGTERM)
        return self.proc.wait(timeout=timeout)

    def kill(self):
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait(timeout=5.0)


@pytest.fixture
def reap():
    procs: list[CliProcess] = []
    yield procs.append
    for proc in procs:
        proc.kill()


def test_run_authority_serves_shard_subset(tmp_path, reap):
    keys_dir = keygen(tmp_path, count=4, seed=21)
    base = next_base_port()
    committee_path = make_committee_file(tmp_path, keys_dir, base_port=base, shards=4)

    server = CliProcess(
        "run-authority",
        "--committee", committee_path,
        "--key", keys_dir / "authority-1.key",
        "--shard-range", "1:3",
    )
    reap(server)
    ready = server.expect("ready authority=")
    assert "shards=1:3" in ready
    expected_ports = f"{base + 64 + 1},{base + 64 + 2}"
    assert f"ports={expected_ports}" in ready
    assert server.terminate() == 0


def test_run_authority_rejects_bad_shard_range(tmp_path, capsys):
    keys_dir = keygen(tmp_path, count=4, seed=22)
    committee_path = make_committee_file(tmp_path, keys_dir, base_port=next_base_port())
    rc = run_cli(
        "run-authority",
        "--committee", committee_path,
        "--key", keys_dir / "authority-0.key",
        "--shard-range", "0:9",
    )
    assert rc == 1
    assert "shard range" in capsys.readouterr().err


def test_run_authority_fails_on_port_conflict(tmp_path, reap):
    keys_dir = keygen(tmp_path, count=4, seed=23)
    committee_path = make_committee_file(tmp_path, keys_dir, base_port=next_base_port())

    first = CliProcess(
        "run-authority", "--committee", committee_path, "--key", keys_dir / "authority-0.key"
    )
    reap(first)
    first.expect("ready authority=")

    second = CliProcess(
        "run-authority", "--committee", committee_path, "--key", keys_dir / "authority-0.key"
    )
    reap(second)
    assert second.proc.wait(timeout=20.0) == 1
    assert first.terminate() == 0


def test_operator_round_trip(tmp_path, reap, capsys):
    """fund -> transfer -> query -> escrow payout, against real servers."""
    keys_dir = keygen(tmp_path, count=4, seed=31)
    base = next_base_port()
    committee_path = make_committee_file(tmp_path, keys_dir, base_port=base)

    for i in range(4):
        server = CliProcess(
            "run-authority", "--committee", committee_path, "--key", keys_dir / f"authority-{i}.key"
        )
        reap(server)
        server.expect("ready authority=")

    alice_dir = keygen(tmp_path, count=1, seed=41, prefix="alice")
    alice_key = alice_dir / "alice-0.key"
    alice = load_key_file(alice_key)
    bob = KeyPair.from_seed(42)
    primary_path = tmp_path / "primary.json"
    wallet_path = tmp_path / "alice-wallet.json"
    capsys.readouterr()

    rc = run_cli(
        "fund",
        "--committee", committee_path,
        "--primary", primary_path,
        "--to", alice.address.hex(),
        "--amount", 100,
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "funding index 1" in out
    assert "pushed 1 funding records" in out

    rc = run_cli(
        "transfer",
        "--committee", committee_path,
        "--key", alice_key,
        "--state", wallet_path,
        "--primary", primary_path,
        "--to", bob.address.hex(),
        "--amount", 40,
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "certified (3 signatures), settled" in out
    assert "balance 60" in out  # sender view
    assert "balance 40" in out  # recipient view

    rc = run_cli("query-balance", "--committee", committee_path, "--address", bob.address.hex())
    assert rc == 0
    out = capsys.readouterr().out
    assert "settled view: balance 40, next sequence 0" in out

    # Overspending is refused locally, before any authority sees it.
    rc = run_cli(
        "transfer",
        "--committee", committee_path,
        "--state", wallet_path,
        "--to", bob.address.hex(),
        "--amount", 500,
    )
    assert rc == 1
    assert "exceeds spendable" in capsys.readouterr().err

    # Pay 10 back into the escrow and redeem it on the primary ledger.
    rc = run_cli(
        "transfer",
        "--committee", committee_path,
        "--state", wallet_path,
        "--to", alice.address.hex(),
        "--to-primary",
        "--amount", 10,
    )
    assert rc == 0
    assert "certified (3 signatures), settled" in capsys.readouterr().out

    rc = run_cli(
        "redeem",
        "--committee", committee_path,
        "--primary", primary_path,
        "--state", wallet_path,
        "--sequence", 1,
    )
    assert rc == 0
    out = capsys.readouterr().out
    assert "redeemed sequence 1 for 10" in out
    assert "escrow total 90" in out

    rc = run_cli(
        "redeem",
        "--committee", committee_path,
        "--primary", primary_path,
        "--state", wallet_path,
        "--sequence", 1,
    )
    assert rc == 1
    assert "redeem rejected" in capsys.readouterr().err

    wallet = json.loads(wallet_path.read_text())
    assert wallet["next_sequence"] == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "settlenet" in capsys.readouterr().out
