"""Committee membership, quorum arithmetic, and shard assignment.

A committee is a fixed set of N = 3f+1 equally weighted authorities named
by their verification keys. Any 2f+1 of them form a quorum; two quorums
always share at least f+1 members, hence at least one honest one.

Shard assignment is a pure function of the address bytes so every party
computes the same routing without coordination.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from . import crypto
from .errors import MalformedMessage, UnknownAuthority


@dataclass(frozen=True)
class Committee:
    authorities: tuple[bytes, ...]

    def __post_init__(self):
        n = len(self.authorities)
        if n < 1 or n % 3 != 1:
            raise MalformedMessage(f"committee size {n} is not 3f+1")
        if len(set(self.authorities)) != n:
            raise MalformedMessage("duplicate authority names in committee")
        for name in self.authorities:
            if len(name) != crypto.KEY_LEN:
                raise MalformedMessage("authority name must be a 32-byte key")
        object.__setattr__(self, "members", frozenset(self.authorities))

    @property
    def size(self) -> int:
        return len(self.authorities)

    @property
    def max_faulty(self) -> int:
        return (len(self.authorities) - 1) // 3

    def quorum_threshold(self) -> int:
        return 2 * self.max_faulty + 1


@dataclass(frozen=True, slots=True)
class ShardAssignment:
    """Maps addresses to shards: first 8 address bytes, big-endian, mod count."""

    num_shards: int

    def __post_init__(self):
        if self.num_shards < 1:
            raise MalformedMessage("num_shards must be positive")

    def which_shard(self, address: bytes) -> int:
        if len(address) != crypto.ADDRESS_LEN:
            raise MalformedMessage("address must be 32 bytes")
        return int.from_bytes(address[:8], "big") % self.num_shards

    def in_shard(self, shard_id: int, address: bytes) -> bool:
        return self.which_shard(address) == shard_id


@dataclass(frozen=True, slots=True)
class AuthorityEntry:
    """One committee-file row: name plus where its shards listen."""

    name: bytes
    host: str
    base_port: int
    num_shards: int

    def shard_endpoint(self, shard_id: int) -> tuple[str, int]:
        if not 0 <= shard_id < self.num_shards:
            raise MalformedMessage(f"shard {shard_id} out of range")
        return (self.host, self.base_port + shard_id)


@dataclass(frozen=True)
class CommitteeConfig:
    """Committee plus deployment endpoints, as read from the committee file."""

    entries: tuple[AuthorityEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "committee", Committee(tuple(e.name for e in self.entries)))
        object.__setattr__(self, "by_name", {e.name: e for e in self.entries})

    def entry(self, name: bytes) -> AuthorityEntry:
        found = self.by_name.get(name)
        if found is None:
            raise UnknownAuthority(f"no committee entry for {name.hex()[:8]}")
        return found

    def shard_assignment(self, name: bytes) -> ShardAssignment:
        return ShardAssignment(self.entry(name).num_shards)


def save_committee_file(path: Union[str, Path], config: CommitteeConfig) -> None:
    doc = {
        "authorities": [
            {
                "name": e.name.hex(),
                "host": e.host,
                "base_port": e.base_port,
                "num_shards": e.num_shards,
            }
            for e in config.entries
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_committee_file(path: Union[str, Path]) -> CommitteeConfig:
    try:
        doc = json.loads(Path(path).read_text())
        entries = tuple(
            AuthorityEntry(
                name=bytes.fromhex(row["name"]),
                host=row["host"],
                base_port=int(row["base_port"]),
                num_shards=int(row["num_shards"]),
            )
            for row in doc["authorities"]
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedMessage(f"bad committee file {path}: {exc}") from exc
    return CommitteeConfig(entries)
