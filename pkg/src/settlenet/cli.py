"""Operator command line: key and committee management, authority
servers, client transfers, funding and redemption against the simulated
primary ledger, benchmarks, and the offline auditor.

Every subcommand works from plain files: JSON key files, a JSON
committee file naming each authority's endpoint layout, JSON snapshots
for the primary ledger and client wallets, and line-delimited canonical
dumps for audits.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .audit import audit, format_report, load_dump_dir
from .bench import (
    BenchConfig,
    format_microbench,
    format_result,
    run_bench,
    run_microbench,
    write_csv,
)
from .client import Client, ClientState
from .committee import (
    AuthorityEntry,
    CommitteeConfig,
    load_committee_file,
    save_committee_file,
)
from .core import AccountInfoRequest, FundingTransaction, Recipient
from .crypto import KeyPair, deterministic_keypairs
from .errors import ProtocolError
from .network import ShardServer, UdpClientTransport, channel_key_for
from .primary import PrimaryState

log = logging.getLogger("settlenet.cli")

KEY_FORMAT = "settlenet-key-1"


class CommandError(Exception):
    """Operator-facing failure: printed without a traceback, exit code 1."""


# -- Key and committee files -----------------------------------------------


def write_key_file(path: Path, keypair: KeyPair) -> None:
    doc = {
        "format": KEY_FORMAT,
        "secret": keypair.secret_bytes.hex(),
        "public": keypair.public_bytes.hex(),
        "address": keypair.address.hex(),
    }
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(json.dumps(doc, indent=2) + "\n")


def load_key_file(path: Path) -> KeyPair:
    try:
        doc = json.loads(path.read_text())
        if doc.get("format") != KEY_FORMAT:
            raise ValueError(f"unexpected format {doc.get('format')!r}")
        keypair = KeyPair(bytes.fromhex(doc["secret"]))
    except (OSError, ValueError, KeyError, ProtocolError) as exc:
        raise CommandError(f"cannot read key file {path}: {exc}") from exc
    if doc.get("public") not in (None, keypair.public_bytes.hex()):
        raise CommandError(f"key file {path} is inconsistent")
    return keypair


def cmd_keygen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.seed is not None:
        pairs = deterministic_keypairs(args.count, f"settlenet-keygen-{args.seed}")
    else:
        pairs = [KeyPair.generate() for _ in range(args.count)]
    for i, keypair in enumerate(pairs):
        path = out / f"{args.prefix}-{i}.key"
        write_key_file(path, keypair)
        print(f"wrote {path} (name {keypair.public_bytes.hex()[:8]})")
    return 0


def cmd_committee(args) -> int:
    keys_dir = Path(args.keys)
    key_files = sorted(keys_dir.glob("*.key"))
    if not key_files:
        raise CommandError(f"no *.key files in {keys_dir}")
    if args.shards < 1 or args.shards > 64:
        raise CommandError("shards per authority must be between 1 and 64")
    pairs = [load_key_file(path) for path in key_files]
    entries = tuple(
        AuthorityEntry(
            name=kp.public_bytes,
            host=args.host,
            base_port=args.base_port + 64 * i,
            num_shards=args.shards,
        )
        for i, kp in enumerate(pairs)
    )
    try:
        config = CommitteeConfig(entries)
    except ProtocolError as exc:
        raise CommandError(str(exc)) from exc
    save_committee_file(args.out, config)
    committee = config.committee
    print(
        f"wrote {args.out}: {committee.size} authorities,"
        f" quorum {committee.quorum_threshold()}, tolerating {committee.max_faulty} faults,"
        f" {args.shards} shard(s) each"
    )
    return 0


# -- Authority server ------------------------------------------------------


def _parse_shard_range(text: Optional[str], num_shards: int) -> range:
    if not text:
        return range(num_shards)
    try:
        first_text, _, last_text = text.partition(":")
        first, last = int(first_text), int(last_text)
    except ValueError as exc:
        raise CommandError(f"bad shard range {text!r}, expected A:B") from exc
    if not (0 <= first < last <= num_shards):
        raise CommandError(f"shard range {text} outside 0:{num_shards}")
    return range(first, last)


def _load_genesis_sync_orders(path: Path):
    from .core import PrimarySynchronizationOrder

    try:
        doc = json.loads(path.read_text())
        if doc.get("format") != "settlenet-primary-1":
            raise ValueError("not a primary snapshot")
        return [
            PrimarySynchronizationOrder(
                transaction_index=int(row["index"]),
                recipient=bytes.fromhex(row["recipient"]),
                amount=int(row["amount"]),
            )
            for row in sorted(doc["funding"], key=lambda r: int(r["index"]))
        ]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CommandError(f"cannot read genesis snapshot {path}: {exc}") from exc


def cmd_run_authority(args) -> int:
    from .authority import AuthorityState

    config = _load_committee(args.committee)
    keypair = load_key_file(Path(args.key))
    try:
        entry = config.entry(keypair.public_bytes)
    except ProtocolError as exc:
        raise CommandError(str(exc)) from exc
    shards = _parse_shard_range(args.shard_range, entry.num_shards)
    genesis = _load_genesis_sync_orders(Path(args.genesis)) if args.genesis else []

    servers = []
    for shard_id in shards:
        state = AuthorityState(
            keypair, config.committee, shard_id=shard_id, num_shards=entry.num_shards
        )
        for sync in genesis:
            state.handle_primary_synchronization_order(sync)
        servers.append(ShardServer(state, entry, channel_key_for(keypair)))

    threads = []
    try:
        for server in servers:
            thread = threading.Thread(target=server.serve_forever, daemon=True)
            thread.start()
            threads.append(thread)
        deadline = time.monotonic() + 10.0
        for server, thread in zip(servers, threads):
            if not server.ready_event.wait(max(0.0, deadline - time.monotonic())):
                raise CommandError(f"shard server on {server.endpoint} failed to start")
            if not thread.is_alive():
                raise CommandError(f"shard server on {server.endpoint} exited at startup")
        stop = threading.Event()
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
        signal.signal(signal.SIGINT, lambda *_: stop.set())
        # Handlers are installed before the announcement: a supervisor may
        # send SIGTERM the instant it reads this line.
        ports = ",".join(str(s.endpoint[1]) for s in servers)
        print(
            f"ready authority={keypair.public_bytes.hex()[:8]}"
            f" shards={shards.start}:{shards.stop} ports={ports}",
            flush=True,
        )
        while not stop.is_set():
            stop.wait(0.2)
            if any(not t.is_alive() for t in threads):
                raise CommandError("a shard server thread died")
    finally:
        for server in servers:
            server.stop()
        for thread in threads:
            thread.join(timeout=3.0)
    print("stopped", flush=True)
    return 0


# -- Client commands -------------------------------------------------------


def _load_committee(path: str) -> CommitteeConfig:
    try:
        return load_committee_file(path)
    except (OSError, ProtocolError) as exc:
        raise CommandError(f"cannot read committee file {path}: {exc}") from exc


def _load_client(args, config: CommitteeConfig) -> Client:
    state_path = Path(args.state) if args.state else None
    if state_path is not None and state_path.exists():
        try:
            state = ClientState.load(state_path)
        except (OSError, ProtocolError, ValueError, KeyError) as exc:
            raise CommandError(f"cannot read wallet state {state_path}: {exc}") from exc
        if args.key:
            keypair = load_key_file(Path(args.key))
            if keypair.secret_bytes != state.keypair.secret_bytes:
                raise CommandError("wallet state belongs to a different key")
    elif args.key:
        state = ClientState(keypair=load_key_file(Path(args.key)))
    else:
        raise CommandError("need --key (or an existing --state wallet file)")
    client = Client(
        state,
        config,
        UdpClientTransport(),
        state_path=state_path,
        request_timeout=args.timeout,
    )
    if getattr(args, "primary", None):
        primary_path = Path(args.primary)
        if primary_path.exists():
            try:
                primary = PrimaryState.load_snapshot(config.committee, primary_path)
            except ProtocolError as exc:
                raise CommandError(f"cannot read primary snapshot: {exc}") from exc
            client.receive_from_primary(primary.funding_log)
    return client


def _quorum_view(client: Client, address: bytes) -> tuple[Optional[tuple[int, int]], int, dict]:
    """Query every authority for one account; return the (balance,
    next_sequence) pair that at least a quorum reports, how many agree,
    and the per-authority raw answers."""
    answers: dict[bytes, tuple[int, int]] = {}
    for name in client.committee.authorities:
        try:
            resp = client.query_account(name, AccountInfoRequest(address=address))
        except ProtocolError:
            continue
        answers[name] = (resp.balance, resp.next_sequence)
    counts: dict[tuple[int, int], int] = {}
    for pair in answers.values():
        counts[pair] = counts.get(pair, 0) + 1
    threshold = client.committee.quorum_threshold()
    for pair, count in sorted(counts.items(), key=lambda kv: -kv[1]):
        if count >= threshold:
            return pair, count, answers
    return None, 0, answers


def _print_quorum_view(client: Client, label: str, address: bytes) -> None:
    pair, count, answers = _quorum_view(client, address)
    total = client.committee.size
    if pair is None:
        print(f"{label} {address.hex()[:8]}: no quorum agreement ({len(answers)} replies)")
        for name, (balance, seq) in sorted(answers.items()):
            print(f"  authority {name.hex()[:8]}: balance {balance}, next sequence {seq}")
    else:
        balance, seq = pair
        print(
            f"{label} {address.hex()[:8]}: balance {balance}, next sequence {seq}"
            f" ({count} of {total} authorities agree)"
        )


def cmd_transfer(args) -> int:
    config = _load_committee(args.committee)
    client = _load_client(args, config)
    try:
        recipient_raw = bytes.fromhex(args.to)
    except ValueError as exc:
        raise CommandError("--to must be a 64-hex-digit address") from exc
    recipient = (
        Recipient.primary(recipient_raw) if args.to_primary else Recipient.settlement(recipient_raw)
    )
    try:
        cert = client.initiate_transfer(recipient, args.amount)
    except ProtocolError as exc:
        raise CommandError(f"transfer failed: {exc}") from exc
    finally:
        client.close()
    print(f"certificate {cert.order.digest().hex()}")
    print(f"certified ({len(cert.signatures)} signatures), settled")
    viewer = Client(client.state, config, UdpClientTransport(), request_timeout=args.timeout)
    try:
        _print_quorum_view(viewer, "sender", client.state.address)
        if not args.to_primary:
            _print_quorum_view(viewer, "recipient", recipient_raw)
    finally:
        viewer.close()
    return 0


def cmd_query_balance(args) -> int:
    config = _load_committee(args.committee)
    if args.address:
        try:
            address = bytes.fromhex(args.address)
        except ValueError as exc:
            raise CommandError("--address must be a 64-hex-digit address") from exc
    elif args.key:
        address = load_key_file(Path(args.key)).address
    elif args.state:
        address = ClientState.load(Path(args.state)).address
    else:
        raise CommandError("need --address, --key, or --state")
    probe = ClientState(keypair=KeyPair.from_seed(0))
    client = Client(probe, config, UdpClientTransport(), request_timeout=args.timeout)
    try:
        pair, count, answers = _quorum_view(client, address)
        for name, (balance, seq) in sorted(answers.items()):
            print(f"authority {name.hex()[:8]}: balance {balance}, next sequence {seq}")
        if pair is None:
            print(f"no quorum agreement ({len(answers)} of {config.committee.size} replied)")
            return 1
        balance, seq = pair
        print(
            f"settled view: balance {balance}, next sequence {seq}"
            f" ({count} of {config.committee.size} authorities agree)"
        )
    finally:
        client.close()
    return 0


def cmd_fund(args) -> int:
    config = _load_committee(args.committee)
    primary_path = Path(args.primary)
    if primary_path.exists():
        primary = PrimaryState.load_snapshot(config.committee, primary_path)
    else:
        primary = PrimaryState(config.committee)
    try:
        recipient = bytes.fromhex(args.to)
    except ValueError as exc:
        raise CommandError("--to must be a 64-hex-digit address") from exc
    try:
        sync = primary.handle_funding_transaction(
            FundingTransaction(recipient=recipient, amount=args.amount)
        )
    except ProtocolError as exc:
        raise CommandError(f"funding rejected: {exc}") from exc
    primary.save_snapshot(primary_path)
    print(
        f"funded {recipient.hex()[:8]} with {args.amount}"
        f" (funding index {sync.transaction_index}, escrow total {primary.total_balance})"
    )
    if not args.no_push:
        probe = ClientState(keypair=KeyPair.from_seed(0))
        probe.sync_orders = list(primary.funding_log)
        client = Client(probe, config, UdpClientTransport(), request_timeout=args.timeout)
        try:
            client.push_funding_to_authorities()
        finally:
            client.close()
        print(f"pushed {len(primary.funding_log)} funding records to all authorities")
    return 0


def cmd_redeem(args) -> int:
    config = _load_committee(args.committee)
    primary_path = Path(args.primary)
    if not primary_path.exists():
        raise CommandError(f"no primary snapshot at {primary_path}")
    primary = PrimaryState.load_snapshot(config.committee, primary_path)
    try:
        state = ClientState.load(Path(args.state))
    except (OSError, ProtocolError, ValueError, KeyError) as exc:
        raise CommandError(f"cannot read wallet state {args.state}: {exc}") from exc
    cert = state.known_certificates.get(args.sequence)
    if cert is None:
        raise CommandError(f"wallet holds no certificate for sequence {args.sequence}")
    from .core import RedeemTransaction

    try:
        primary.handle_redeem_transaction(RedeemTransaction(certificate=cert))
    except ProtocolError as exc:
        raise CommandError(f"redeem rejected: {exc}") from exc
    primary.save_snapshot(primary_path)
    print(
        f"redeemed sequence {args.sequence} for {cert.order.amount}"
        f" to {cert.order.recipient.address.hex()[:8]} (escrow total {primary.total_balance})"
    )
    return 0


# -- Benchmarks and audit --------------------------------------------------


def cmd_bench(args) -> int:
    committee_config = None
    committee_size = 4
    if args.committee and not args.local:
        if args.committee.isdigit():
            committee_size = int(args.committee)
        else:
            committee_config = _load_committee(args.committee)
            committee_size = committee_config.committee.size
    elif args.committee:
        if not args.committee.isdigit():
            raise CommandError("--local benches take a committee size, not a file")
        committee_size = int(args.committee)
    shards = args.shards
    if committee_config is not None:
        shards = committee_config.entries[0].num_shards
    try:
        config = BenchConfig(
            committee_size=committee_size,
            shards_per_authority=shards,
            load=args.load,
            in_flight=args.in_flight,
            phase=args.phase,
            wait_mode=args.wait_mode,
            seed=args.seed,
            base_port=args.base_port,
            wan_rtt_ms=args.wan_rtt,
            authority_index=args.authority,
        )
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    result = run_bench(config, committee_config=committee_config)
    print(format_result(result))
    if args.csv_out:
        write_csv(args.csv_out, [result])
        print(f"appended CSV row to {args.csv_out}")
    if result.audit_ok is False:
        raise CommandError("post-run audit failed; measurements are not trustworthy")
    if result.completed == 0:
        raise CommandError("no transactions completed")
    return 0


def cmd_microbench(args) -> int:
    if args.runs < 1:
        raise CommandError("--runs must be positive")
    rows = run_microbench(iterations=args.runs, committee_size=args.committee, seed=args.seed)
    print(
        f"message operations, {args.committee}-authority committee,"
        f" mean over {args.runs} distinct inputs:"
    )
    print(format_microbench(rows))
    return 0


def cmd_audit(args) -> int:
    config = _load_committee(args.committee)
    dumps = load_dump_dir(args.dumps)
    if not dumps:
        raise CommandError(f"no *.dump files in {args.dumps}")
    primary_doc = None
    if args.primary:
        try:
            primary_doc = json.loads(Path(args.primary).read_text())
        except (OSError, ValueError) as exc:
            raise CommandError(f"cannot read primary snapshot: {exc}") from exc
    report = audit(config.committee, dumps, primary_doc)
    print(format_report(report))
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        print(f"wrote report to {args.report}")
    return 0 if report.ok else 1


# -- Argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="settlenet",
        description="Byzantine fault tolerant real-time settlement toolkit",
    )
    parser.add_argument("--version", action="version", version=f"settlenet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate authority or client key files")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=4, help="number of keys (default 4)")
    p.add_argument("--seed", type=int, default=None, help="deterministic generation seed")
    p.add_argument("--prefix", default="authority", help="file name prefix")
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("committee", help="assemble a committee file from key files")
    p.add_argument("--keys", required=True, help="directory of *.key files")
    p.add_argument("--out", required=True, help="committee file to write")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--base-port", type=int, default=9500)
    p.add_argument("--shards", type=int, default=1, help="shards per authority")
    p.set_defaults(fn=cmd_committee)

    p = sub.add_parser("run-authority", help="serve one authority's shards")
    p.add_argument("--committee", required=True, help="committee file")
    p.add_argument("--key", required=True, help="this authority's key file")
    p.add_argument("--shard-range", default=None, help="serve only shards A:B")
    p.add_argument("--genesis", default=None, help="primary snapshot to replay at startup")
    p.set_defaults(fn=cmd_run_authority)

    p = sub.add_parser("transfer", help="send a settled transfer")
    p.add_argument("--committee", required=True)
    p.add_argument("--key", default=None, help="sender key file")
    p.add_argument("--state", default=None, help="wallet state file (created if missing)")
    p.add_argument("--primary", default=None, help="primary snapshot to learn funding from")
    p.add_argument("--to", required=True, help="recipient address (hex)")
    p.add_argument("--amount", type=int, required=True)
    p.add_argument("--to-primary", action="store_true", help="pay out to the primary ledger")
    p.add_argument("--timeout", type=float, default=3.0)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("query-balance", help="read one account at every authority")
    p.add_argument("--committee", required=True)
    p.add_argument("--address", default=None, help="account address (hex)")
    p.add_argument("--key", default=None, help="key file to derive the address from")
    p.add_argument("--state", default=None, help="wallet state to derive the address from")
    p.add_argument("--timeout", type=float, default=3.0)
    p.set_defaults(fn=cmd_query_balance)

    p = sub.add_parser("fund", help="fund an account on the simulated primary ledger")
    p.add_argument("--committee", required=True)
    p.add_argument("--primary", required=True, help="primary snapshot file (created if missing)")
    p.add_argument("--to", required=True, help="recipient address (hex)")
    p.add_argument("--amount", type=int, required=True)
    p.add_argument("--no-push", action="store_true", help="do not forward to authorities")
    p.add_argument("--timeout", type=float, default=3.0)
    p.set_defaults(fn=cmd_fund)

    p = sub.add_parser("redeem", help="redeem an outbound certificate on the primary ledger")
    p.add_argument("--committee", required=True)
    p.add_argument("--primary", required=True)
    p.add_argument("--state", required=True, help="wallet holding the certificate")
    p.add_argument("--sequence", type=int, required=True)
    p.set_defaults(fn=cmd_redeem)

    p = sub.add_parser("bench", help="throughput/latency load phases")
    p.add_argument(
        "--committee",
        default=None,
        help="committee file for an external deployment, or a committee size",
    )
    p.add_argument("--local", action="store_true", help="host the committee in-process")
    p.add_argument("--authority", type=int, default=0, help="target authority index")
    p.add_argument("--shards", type=int, default=1, help="shards per authority")
    p.add_argument("--base-port", type=int, default=28000)
    p.add_argument("--load", type=int, default=1000, help="total transactions")
    p.add_argument("--in-flight", type=int, default=100, help="max outstanding")
    p.add_argument("--phase", choices=("transfer-orders", "confirmations", "end-to-end"),
                   default="end-to-end")
    p.add_argument("--wait-mode", choices=("first-quorum", "all-authorities"),
                   default="first-quorum")
    p.add_argument("--wan-rtt", type=float, default=0.0,
                   help="emulated extra round-trip milliseconds per request")
    p.add_argument("--csv-out", default=None, help="append one CSV row here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("microbench", help="time the six core message operations")
    p.add_argument("--runs", type=int, default=500)
    p.add_argument("--committee", type=int, default=10, help="committee size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_microbench)

    p = sub.add_parser("audit", help="offline audit of authority dumps")
    p.add_argument("--committee", required=True)
    p.add_argument("--dumps", required=True, help="directory of *.dump files")
    p.add_argument("--primary", default=None, help="primary snapshot")
    p.add_argument("--report", default=None, help="write a JSON report here")
    p.set_defaults(fn=cmd_audit)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.fn(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
