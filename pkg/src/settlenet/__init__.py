"""Byzantine fault tolerant real-time gross settlement on per-account
consistent broadcast.

A committee of 3f+1 authorities settles pre-funded transfers with quorum
certificates instead of consensus: an order certified by 2f+1 authorities
is final, and settlement is the idempotent replay of that certificate.
"""

__version__ = "0.1.0"

from .audit import AuditFinding, AuditReport, audit
from .authority import AuthorityState
from .client import Client, ClientState
from .committee import Committee, CommitteeConfig, ShardAssignment
from .core import (
    AccountInfoRequest,
    AccountInfoResponse,
    CertifiedTransfer,
    CrossShardUpdate,
    FundingTransaction,
    PrimarySynchronizationOrder,
    Recipient,
    RecipientKind,
    RedeemTransaction,
    SignedTransferOrder,
    TransferOrder,
    aggregate_certificate,
    sign_transfer_order,
    verify_certificate,
    verify_order_signature,
)
from .crypto import KeyPair, derive_address
from .errors import ErrorCode, ProtocolError, QuorumUnreachable, TransportTimeout
from .primary import PrimaryState
from .sim import (
    SAFETY_MENU,
    Behavior,
    NetworkModel,
    SimConfig,
    Trace,
    all_checks_pass,
    check_invariants,
    equivocation_scenario,
    run_simulation,
)

__all__ = [
    "AccountInfoRequest",
    "AccountInfoResponse",
    "AuditFinding",
    "AuditReport",
    "AuthorityState",
    "Behavior",
    "CertifiedTransfer",
    "Client",
    "ClientState",
    "Committee",
    "CommitteeConfig",
    "CrossShardUpdate",
    "ErrorCode",
    "FundingTransaction",
    "KeyPair",
    "NetworkModel",
    "PrimarySynchronizationOrder",
    "PrimaryState",
    "ProtocolError",
    "QuorumUnreachable",
    "Recipient",
    "RecipientKind",
    "RedeemTransaction",
    "SAFETY_MENU",
    "ShardAssignment",
    "SignedTransferOrder",
    "SimConfig",
    "Trace",
    "TransferOrder",
    "TransportTimeout",
    "aggregate_certificate",
    "all_checks_pass",
    "audit",
    "check_invariants",
    "derive_address",
    "equivocation_scenario",
    "run_simulation",
    "sign_transfer_order",
    "verify_certificate",
    "verify_order_signature",
]
