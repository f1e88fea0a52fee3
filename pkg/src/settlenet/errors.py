"""Protocol error hierarchy.

Every error that can cross the wire carries a stable numeric code so that
servers can answer with an ErrorResponse datagram and clients can map it
back to the same exception class.
"""

from __future__ import annotations

from enum import IntEnum


class ErrorCode(IntEnum):
    MALFORMED_MESSAGE = 1
    INVALID_SIGNATURE = 2
    QUORUM_NOT_REACHED = 3
    UNKNOWN_AUTHORITY = 4
    DUPLICATE_SIGNER = 5
    CERTIFICATE_MISMATCH = 6
    WRONG_SHARD = 7
    UNKNOWN_SENDER_ACCOUNT = 8
    UNKNOWN_ACCOUNT = 9
    PREVIOUS_TRANSFER_PENDING = 10
    UNEXPECTED_SEQUENCE = 11
    INSUFFICIENT_FUNDS = 12
    INVALID_AMOUNT = 13
    MISSING_EARLIER_CONFIRMATIONS = 14
    PRIMARY_RECIPIENT = 15
    SYNC_ORDER_GAP = 16
    ALREADY_REDEEMED = 17
    NOT_PRIMARY_RECIPIENT = 18
    INSOLVENCY_DETECTED = 19
    OVERFLOW = 20
    INTERNAL = 21


class ProtocolError(Exception):
    """Base class for all settlement protocol failures."""

    code = ErrorCode.INTERNAL

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.__class__.__name__)
        self.detail = detail


class MalformedMessage(ProtocolError):
    code = ErrorCode.MALFORMED_MESSAGE


class InvalidSignature(ProtocolError):
    code = ErrorCode.INVALID_SIGNATURE


class QuorumNotReached(ProtocolError):
    code = ErrorCode.QUORUM_NOT_REACHED


class UnknownAuthority(ProtocolError):
    code = ErrorCode.UNKNOWN_AUTHORITY


class DuplicateSigner(ProtocolError):
    code = ErrorCode.DUPLICATE_SIGNER


class CertificateMismatch(ProtocolError):
    code = ErrorCode.CERTIFICATE_MISMATCH


class WrongShard(ProtocolError):
    code = ErrorCode.WRONG_SHARD


class UnknownSenderAccount(ProtocolError):
    code = ErrorCode.UNKNOWN_SENDER_ACCOUNT


class UnknownAccount(ProtocolError):
    code = ErrorCode.UNKNOWN_ACCOUNT


class PreviousTransferPending(ProtocolError):
    code = ErrorCode.PREVIOUS_TRANSFER_PENDING


class UnexpectedSequence(ProtocolError):
    code = ErrorCode.UNEXPECTED_SEQUENCE


class InsufficientFunds(ProtocolError):
    code = ErrorCode.INSUFFICIENT_FUNDS


class InvalidAmount(ProtocolError):
    code = ErrorCode.INVALID_AMOUNT


class MissingEarlierConfirmations(ProtocolError):
    code = ErrorCode.MISSING_EARLIER_CONFIRMATIONS


class PrimaryRecipient(ProtocolError):
    code = ErrorCode.PRIMARY_RECIPIENT


class SyncOrderGap(ProtocolError):
    code = ErrorCode.SYNC_ORDER_GAP


class AlreadyRedeemed(ProtocolError):
    code = ErrorCode.ALREADY_REDEEMED


class NotPrimaryRecipient(ProtocolError):
    code = ErrorCode.NOT_PRIMARY_RECIPIENT


class InsolvencyDetected(ProtocolError):
    code = ErrorCode.INSOLVENCY_DETECTED


class AmountOverflow(ProtocolError):
    code = ErrorCode.OVERFLOW


_BY_CODE = {cls.code: cls for cls in ProtocolError.__subclasses__()}


# Client-local failures; these never cross the wire, so they are defined
# after the code map is frozen and share codes with their nearest kin.


class QuorumUnreachable(ProtocolError):
    """Fewer than 2f+1 authorities produced a valid response within budget."""

    code = ErrorCode.QUORUM_NOT_REACHED


class Unrepairable(ProtocolError):
    """A certificate needed for repair could not be found anywhere."""

    code = ErrorCode.INTERNAL


class TransportTimeout(ProtocolError):
    """No response from an endpoint within the retry budget."""

    code = ErrorCode.INTERNAL


def error_for_code(code: int, detail: str = "") -> ProtocolError:
    """Rebuild the exception for a wire error code (unknown codes -> ProtocolError)."""
    try:
        cls = _BY_CODE[ErrorCode(code)]
    except (ValueError, KeyError):
        return ProtocolError(f"unknown error code {code}: {detail}")
    return cls(detail)
