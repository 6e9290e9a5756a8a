"""Exception hierarchy shared by all cfc subsystems.

Every refusal the system can issue has its own class so that callers (and the
scenario reports) can tell causes apart by type name alone.
"""

from __future__ import annotations


class CfcError(Exception):
    """Base class for every error raised by this package."""

    @property
    def cause(self) -> str:
        return type(self).__name__


# --- envelope -------------------------------------------------------------

class EnvelopeError(CfcError):
    pass


class MalformedKey(EnvelopeError):
    pass


class AuthFailure(EnvelopeError):
    """Authenticated decryption failed (wrong key, wrong context, or tampering)."""


class Truncated(EnvelopeError):
    pass


class BadMagic(EnvelopeError):
    pass


class UnsupportedVersion(EnvelopeError):
    pass


# --- attestation ----------------------------------------------------------

class AttestationError(CfcError):
    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{layer}: {message}")
        self.layer = layer


class BrokenChain(AttestationError):
    pass


class DigestNotAllowed(AttestationError):
    pass


class MissingInclusionProof(AttestationError):
    pass


class BadEndorsementSignature(AttestationError):
    pass


# --- policy ---------------------------------------------------------------

class PolicyError(CfcError):
    pass


class InvalidPolicy(PolicyError):
    pass


class CyclicPolicy(InvalidPolicy):
    pass


class DanglingEdge(InvalidPolicy):
    pass


class BadConstraint(InvalidPolicy):
    pass


class NoMatchingEdge(PolicyError):
    pass


class ConstraintViolation(PolicyError):
    def __init__(self, bound: str, message: str):
        super().__init__(f"{bound}: {message}")
        self.bound = bound


class AmbiguousEdge(PolicyError):
    pass


# --- ledger ---------------------------------------------------------------

class LedgerError(CfcError):
    pass


class UnknownKey(LedgerError):
    pass


class KeyExpired(LedgerError):
    pass


class PolicyDigestMismatch(LedgerError):
    pass


class BadEvidence(LedgerError):
    pass


class BudgetExhausted(LedgerError):
    pass


class NonceReplay(LedgerError):
    pass


class UnwrapFailed(LedgerError):
    """The wrapped data key did not open under the claimed key, policy and stage."""


# --- transparency ---------------------------------------------------------

class OutOfRange(CfcError):
    pass


# --- dpquery --------------------------------------------------------------

class QuerySyntaxError(CfcError):
    def __init__(self, message: str, line: int, column: int, token: str):
        super().__init__(f"{line}:{column}: {message} (at {token!r})")
        self.line = line
        self.column = column
        self.token = token


class QuerySemanticError(CfcError):
    pass


class AdmissionDenied(CfcError):
    def __init__(self, bound: str, message: str):
        super().__init__(f"{bound}: {message}")
        self.bound = bound


# --- aggcore --------------------------------------------------------------

class ArityMismatch(CfcError):
    pass


class InvalidBudget(CfcError):
    pass


class DimensionMismatch(CfcError):
    pass


# --- client ---------------------------------------------------------------

class UploadRefused(CfcError):
    """Base for the client's fail-closed upload checks."""

    check = "upload"


class EvidenceRejected(UploadRefused):
    check = "ledger_evidence"


class BundleSignatureInvalid(UploadRefused):
    check = "bundle_signature"


class PolicyNotEndorsed(UploadRefused):
    check = "policy_endorsement"


class PolicyInclusionMissing(UploadRefused, MissingInclusionProof):
    check = "policy_inclusion_proof"


class ClockSkew(UploadRefused):
    check = "clock_skew"


class SchemaMismatch(CfcError):
    pass


# --- pipeline -------------------------------------------------------------

class PipelineError(CfcError):
    pass


class ReleaseForbidden(PipelineError):
    pass


class NonceReplayDetected(PipelineError):
    pass


class BadLedgerResponse(PipelineError):
    pass


class FunctionMisbehavior(PipelineError):
    pass


class TransformCrashed(PipelineError):
    pass


class StageFailed(PipelineError):
    def __init__(self, stage: int, causes: dict[str, CfcError]):
        kinds = sorted({c.cause for c in causes.values()})
        super().__init__(f"stage {stage}: {len(causes)} blob(s) failed ({', '.join(kinds)})")
        self.stage = stage
        self.causes = causes
