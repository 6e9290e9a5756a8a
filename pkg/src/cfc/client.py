"""Simulated end-user device.

Before uploading, a device checks, in order:

1. the ledger's attestation evidence against its reference values,
2. the ledger key bundle signature against the attested signing key,
3. the access policy endorsement (and its inclusion proof, if required),
4. the ledger's clock against its own.

Only then does it encrypt.  Every attempt leaves an attestation verification
record an auditor can re-check offline; only a successful upload is logged in
the operational stats that drive eligibility.
"""

from __future__ import annotations

import os
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import canonical
from .aggcore import ClientTable
from .attestation import (
    AttestationEvidence,
    Endorsement,
    ReferenceValues,
    SubjectKind,
    check_endorsed,
    verify_evidence,
)
from .clock import MINUTE, Clock, system_clock
from .envelope import EncryptedBlob, WrapRequest, encrypt_blob
from .errors import (
    AttestationError,
    BundleSignatureInvalid,
    ClockSkew,
    EvidenceRejected,
    InvalidPolicy,
    MissingInclusionProof,
    PolicyInclusionMissing,
    PolicyNotEndorsed,
    SchemaMismatch,
    UploadRefused,
)
from .ledger import PublicKeyBundle
from .policy import AccessPolicy, canonical_digest
from .transparency import LogSnapshot

LIFETIME = "lifetime"
DEFAULT_SKEW_TOLERANCE_MS = 5 * MINUTE
ACCEPTED = "accepted"
REJECTED = "rejected"


@dataclass(frozen=True)
class OpStat:
    task_id: str
    timestamp: int


@dataclass(frozen=True)
class Summarization:
    """Column projection from the device store into the task's schema."""

    key_columns: tuple[str, ...]
    value_columns: tuple[str, ...]


@dataclass(frozen=True)
class TaskAssignment:
    task_id: str
    summarization: Summarization
    swor_period: int | str | None   # milliseconds, LIFETIME, or None for no limit
    policy: AccessPolicy
    policy_endorsement: Endorsement
    ledger_bundle: PublicKeyBundle
    ledger_evidence: AttestationEvidence
    ledger_endorsements: tuple[Endorsement, ...] = ()
    skew_tolerance_ms: int = DEFAULT_SKEW_TOLERANCE_MS


@dataclass(frozen=True)
class AttestationVerificationRecord:
    device_id: str
    task_id: str
    ledger_evidence: AttestationEvidence
    ledger_endorsements: tuple[Endorsement, ...]
    ledger_bundle: PublicKeyBundle
    policy_digest: bytes
    policy_endorsement: Endorsement
    skew_tolerance_ms: int
    device_clock: int
    verdict: str
    failed_check: str | None = None

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "task_id": self.task_id,
            "ledger_evidence": self.ledger_evidence.to_dict(),
            "ledger_endorsements": [e.to_dict() for e in self.ledger_endorsements],
            "ledger_bundle": self.ledger_bundle.to_dict(),
            "policy_digest": self.policy_digest,
            "policy_endorsement": self.policy_endorsement.to_dict(),
            "skew_tolerance_ms": self.skew_tolerance_ms,
            "device_clock": self.device_clock,
            "verdict": self.verdict,
            "failed_check": self.failed_check,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "AttestationVerificationRecord":
        return cls(
            device_id=d["device_id"],
            task_id=d["task_id"],
            ledger_evidence=AttestationEvidence.from_dict(d["ledger_evidence"]),
            ledger_endorsements=tuple(Endorsement.from_dict(e) for e in d["ledger_endorsements"]),
            ledger_bundle=PublicKeyBundle.from_dict(d["ledger_bundle"]),
            policy_digest=canonical.b64d(d["policy_digest"]),
            policy_endorsement=Endorsement.from_dict(d["policy_endorsement"]),
            skew_tolerance_ms=int(d["skew_tolerance_ms"]),
            device_clock=int(d["device_clock"]),
            verdict=d["verdict"],
            failed_check=d.get("failed_check"),
        )


@dataclass
class DeviceState:
    device_id: str
    store: ClientTable
    opstats: list[OpStat] = field(default_factory=list)
    records: list[AttestationVerificationRecord] = field(default_factory=list)
    clock: Clock = system_clock
    rng: object = os.urandom   # byte source for blob ids; data keys always use os.urandom
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


# ---------------------------------------------------------------------------
# Eligibility and summarization
# ---------------------------------------------------------------------------

def check_eligibility(d: DeviceState, task: TaskAssignment, now: int | None = None) -> bool:
    t = d.clock() if now is None else now
    past = [s.timestamp for s in d.opstats if s.task_id == task.task_id]
    if not past or task.swor_period is None:
        return True
    if task.swor_period == LIFETIME:
        return False
    return all(t - ts >= task.swor_period for ts in past)


def run_summarization(d: DeviceState, task: TaskAssignment) -> ClientTable:
    s = task.summarization
    try:
        ki = [d.store.key_columns.index(c) for c in s.key_columns]
        vi = [d.store.value_columns.index(c) for c in s.value_columns]
    except ValueError as exc:
        raise SchemaMismatch(f"device store lacks a column the task needs: {exc}") from exc
    rows = tuple((tuple(k[i] for i in ki), tuple(v[i] for i in vi)) for k, v in d.store.rows)
    return ClientTable(tuple(s.key_columns), tuple(s.value_columns), rows)


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

def _check_policy(policy_digest: bytes, endorsement: Endorsement, rv: ReferenceValues) -> None:
    if policy_digest in rv.allowed_policy_digests:
        return
    try:
        check_endorsed(policy_digest, SubjectKind.POLICY, [endorsement], rv, "policy")
    except MissingInclusionProof as exc:
        raise PolicyInclusionMissing(str(exc), "policy") from exc
    except AttestationError as exc:
        raise PolicyNotEndorsed(str(exc)) from exc


def run_checks(evidence: AttestationEvidence, ledger_endorsements: Sequence[Endorsement],
               bundle: PublicKeyBundle, policy_digest: bytes, policy_endorsement: Endorsement,
               rv: ReferenceValues, now: int, skew_tolerance_ms: int,
               snapshot: LogSnapshot | None = None) -> None:
    """The device's four pre-upload checks; raises the first that fails.

    With a ``snapshot`` (auditor path) every endorsement relied on must also
    appear in that exported log.
    """
    try:
        identity = verify_evidence(evidence, rv, ledger_endorsements)
    except AttestationError as exc:
        raise EvidenceRejected(f"ledger evidence: {exc}") from exc
    if snapshot is not None:
        for e in ledger_endorsements:
            if e.subject_digest == evidence.chain.application_digest and not snapshot.contains(e):
                raise EvidenceRejected("ledger binary endorsement absent from the log snapshot")
    if not bundle.verify(identity.app_public_keys.signing):
        raise BundleSignatureInvalid("key bundle not signed by the attested ledger")
    _check_policy(policy_digest, policy_endorsement, rv)
    if snapshot is not None and policy_digest not in rv.allowed_policy_digests:
        if not (snapshot.is_consistent() and snapshot.contains(policy_endorsement)):
            raise PolicyInclusionMissing("policy endorsement absent from the log snapshot", "policy")
    if not (bundle.issued_at <= now + skew_tolerance_ms and bundle.expiration > now):
        raise ClockSkew(f"ledger key valid [{bundle.issued_at}, {bundle.expiration}) vs device clock {now} "
                        f"(tolerance {skew_tolerance_ms} ms)")


def _policy_digest(policy: AccessPolicy) -> bytes:
    try:
        return canonical_digest(policy)
    except InvalidPolicy as exc:
        raise PolicyNotEndorsed(f"policy is invalid: {exc}") from exc


def verify_and_upload(d: DeviceState, task: TaskAssignment, rv: ReferenceValues,
                      now: int | None = None, table: ClientTable | None = None) -> EncryptedBlob:
    with d._lock:
        t = d.clock() if now is None else now
        digest = b""
        try:
            digest = _policy_digest(task.policy)
            run_checks(task.ledger_evidence, task.ledger_endorsements, task.ledger_bundle, digest,
                       task.policy_endorsement, rv, t, task.skew_tolerance_ms)
        except UploadRefused as exc:
            d.records.append(_record(d, task, digest, t, REJECTED, exc.check))
            raise
        data = run_summarization(d, task) if table is None else table
        req = WrapRequest(canonical.dumpb(data), digest, task.ledger_bundle.public_key, task.ledger_bundle.key_id)
        blob = encrypt_blob(req, blob_id=None if d.rng is os.urandom else d.rng(16))
        d.opstats.append(OpStat(task.task_id, t))
        d.records.append(_record(d, task, digest, t, ACCEPTED, None))
        return blob


def _record(d: DeviceState, task: TaskAssignment, digest: bytes, now: int, verdict: str,
            failed: str | None) -> AttestationVerificationRecord:
    return AttestationVerificationRecord(
        d.device_id, task.task_id, task.ledger_evidence, tuple(task.ledger_endorsements), task.ledger_bundle,
        digest, task.policy_endorsement, task.skew_tolerance_ms, now, verdict, failed)


def participate(d: DeviceState, task: TaskAssignment, rv: ReferenceValues,
                now: int | None = None) -> EncryptedBlob | None:
    """Eligibility check, summarization and upload; ``None`` if ineligible."""
    t = d.clock() if now is None else now
    if not check_eligibility(d, task, t):
        return None
    return verify_and_upload(d, task, rv, t)


# ---------------------------------------------------------------------------
# Auditor path
# ---------------------------------------------------------------------------

def export_verification_records(d: DeviceState) -> str:
    return "".join(canonical.dumps(r) + "\n" for r in d.records)


def load_verification_records(text: str) -> list[AttestationVerificationRecord]:
    return [AttestationVerificationRecord.from_dict(canonical.loads(line))
            for line in text.splitlines() if line.strip()]


def reverify_record(r: AttestationVerificationRecord, rv: ReferenceValues,
                    snapshot: LogSnapshot | None = None) -> tuple[str, str | None]:
    """Re-run the device's checks offline; returns ``(verdict, failed_check)``."""
    try:
        run_checks(r.ledger_evidence, r.ledger_endorsements, r.ledger_bundle, r.policy_digest,
                   r.policy_endorsement, rv, r.device_clock, r.skew_tolerance_ms, snapshot)
    except UploadRefused as exc:
        return REJECTED, exc.check
    return ACCEPTED, None


def accepted_policy_digests(records: Iterable[AttestationVerificationRecord]) -> set[bytes]:
    return {r.policy_digest for r in records if r.verdict == ACCEPTED}

