"""Simulated layered (DICE-style) attestation.

A software "hardware root" Ed25519 key stands in for the platform security
processor.  Each boot layer is measured, and a per-layer key is derived from
the parent layer's secret and the measurement, so a different digest yields a
different key and a different certificate chain::

    root  --signs-->  (firmware digest, firmware-layer key)
    firmware key --signs--> (kernel digest, kernel-layer key)
    kernel key   --signs--> (application digest, application-layer key)
    application key --signs--> (config digest, app signing + encryption keys)

Verification checks the chain from a configured root, then checks every
measured layer against reference values: either the digest is allowlisted or
an allowed endorser has signed it (with a transparency inclusion proof, if the
reference values require one).
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, NoEncryption, PrivateFormat, PublicFormat

from . import canonical
from .canonical import b64d
from .errors import (
    BadEndorsementSignature,
    BrokenChain,
    DigestNotAllowed,
    MissingInclusionProof,
)
from .transparency import InclusionProof, SignedTreeHead, verify_inclusion

LAYERS = ("firmware", "kernel", "application", "config")


def raw_public(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def ed25519_verify(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class MeasurementChain:
    firmware_digest: bytes
    kernel_digest: bytes
    application_digest: bytes
    config_digest: bytes

    @classmethod
    def measure(cls, firmware: bytes, kernel: bytes, application: bytes, config: bytes) -> "MeasurementChain":
        h = lambda b: hashlib.sha256(b).digest()  # noqa: E731
        return cls(h(firmware), h(kernel), h(application), h(config))

    def digest(self, layer: str) -> bytes:
        return getattr(self, f"{layer}_digest")

    def with_digest(self, layer: str, value: bytes) -> "MeasurementChain":
        return replace(self, **{f"{layer}_digest": value})

    def to_dict(self) -> dict:
        return {layer: self.digest(layer) for layer in LAYERS}

    @classmethod
    def from_dict(cls, d: dict) -> "MeasurementChain":
        return cls(*(b64d(d[layer]) for layer in LAYERS))


@dataclass(frozen=True)
class AppPublicKeys:
    signing: bytes      # Ed25519, raw
    encryption: bytes   # X25519, raw

    def to_dict(self) -> dict:
        return {"signing": self.signing, "encryption": self.encryption}

    @classmethod
    def from_dict(cls, d: dict) -> "AppPublicKeys":
        return cls(b64d(d["signing"]), b64d(d["encryption"]))


@dataclass(frozen=True)
class AttestationEvidence:
    chain: MeasurementChain
    app_public_keys: AppPublicKeys
    root_key_id: bytes
    layer_public_keys: tuple[bytes, ...]  # firmware, kernel, application layer keys
    signatures: tuple[bytes, ...]         # one per entry of LAYERS

    def to_dict(self) -> dict:
        return {
            "chain": self.chain.to_dict(),
            "app_public_keys": self.app_public_keys.to_dict(),
            "root_key_id": self.root_key_id,
            "layer_public_keys": list(self.layer_public_keys),
            "signatures": list(self.signatures),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttestationEvidence":
        return cls(
            chain=MeasurementChain.from_dict(d["chain"]),
            app_public_keys=AppPublicKeys.from_dict(d["app_public_keys"]),
            root_key_id=b64d(d["root_key_id"]),
            layer_public_keys=tuple(b64d(k) for k in d["layer_public_keys"]),
            signatures=tuple(b64d(s) for s in d["signatures"]),
        )


@dataclass(frozen=True)
class VerifiedIdentity:
    chain: MeasurementChain
    app_public_keys: AppPublicKeys


def _layer_statement(layer: str, digest: bytes, subject: dict) -> bytes:
    return canonical.dumpb({"layer": layer, "digest": digest, "subject": subject})


def _statements(ev_chain: MeasurementChain, layer_keys: Sequence[bytes], app: AppPublicKeys) -> list[bytes]:
    subjects = [{"layer_key": k} for k in layer_keys] + [app.to_dict()]
    return [_layer_statement(layer, ev_chain.digest(layer), subj) for layer, subj in zip(LAYERS, subjects)]


def _derive_layer_keys(hardware_root: Ed25519PrivateKey, chain: MeasurementChain) -> list[Ed25519PrivateKey]:
    root_secret = hardware_root.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())
    cdi = hmac.new(root_secret, b"cfc/dice/uds", hashlib.sha256).digest()
    keys = []
    for layer in LAYERS[:-1]:
        cdi = hmac.new(cdi, chain.digest(layer), hashlib.sha256).digest()
        keys.append(Ed25519PrivateKey.from_private_bytes(cdi))
    return keys


def generate_evidence(chain: MeasurementChain, app_keys: AppPublicKeys,
                      hardware_root: Ed25519PrivateKey) -> AttestationEvidence:
    layer_keys = _derive_layer_keys(hardware_root, chain)
    layer_pubs = [raw_public(k) for k in layer_keys]
    signers = [hardware_root] + layer_keys
    sigs = [s.sign(stmt) for s, stmt in zip(signers, _statements(chain, layer_pubs, app_keys))]
    return AttestationEvidence(
        chain=chain,
        app_public_keys=app_keys,
        root_key_id=canonical.key_id(raw_public(hardware_root)),
        layer_public_keys=tuple(layer_pubs),
        signatures=tuple(sigs),
    )


# ---------------------------------------------------------------------------
# Endorsements
# ---------------------------------------------------------------------------

class SubjectKind(str, Enum):
    BINARY = "application-binary"
    POLICY = "access-policy"


@dataclass(frozen=True)
class InclusionRef:
    proof: InclusionProof
    head: SignedTreeHead

    def to_dict(self) -> dict:
        return {"proof": self.proof.to_dict(), "head": self.head.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "InclusionRef":
        return cls(InclusionProof.from_dict(d["proof"]), SignedTreeHead.from_dict(d["head"]))


@dataclass(frozen=True)
class Endorsement:
    subject_digest: bytes
    subject_kind: SubjectKind
    signer_key_id: bytes
    signature: bytes
    inclusion: InclusionRef | None = None

    def signed_bytes(self) -> bytes:
        return SubjectKind(self.subject_kind).value.encode() + self.subject_digest

    def body(self) -> dict:
        return {
            "subject_digest": self.subject_digest,
            "subject_kind": SubjectKind(self.subject_kind).value,
            "signer_key_id": self.signer_key_id,
            "signature": self.signature,
        }

    def leaf_bytes(self) -> bytes:
        return canonical.dumpb(self.body())

    def with_inclusion(self, inclusion: InclusionRef) -> "Endorsement":
        return replace(self, inclusion=inclusion)

    def to_dict(self) -> dict:
        d = self.body()
        d["inclusion"] = None if self.inclusion is None else self.inclusion.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Endorsement":
        inc = d.get("inclusion")
        return cls(
            subject_digest=b64d(d["subject_digest"]),
            subject_kind=SubjectKind(d["subject_kind"]),
            signer_key_id=b64d(d["signer_key_id"]),
            signature=b64d(d["signature"]),
            inclusion=None if inc is None else InclusionRef.from_dict(inc),
        )


def endorse(subject_digest: bytes, subject_kind: SubjectKind, signer: Ed25519PrivateKey) -> Endorsement:
    kind = SubjectKind(subject_kind)
    unsigned = Endorsement(subject_digest, kind, canonical.key_id(raw_public(signer)), b"")
    return replace(unsigned, signature=signer.sign(unsigned.signed_bytes()))


def verify_endorsement(e: Endorsement, public_key: bytes) -> bool:
    if canonical.key_id(public_key) != e.signer_key_id:
        return False
    return ed25519_verify(public_key, e.signature, e.signed_bytes())


# ---------------------------------------------------------------------------
# Reference values and verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceValues:
    """What a verifier accepts.  Byte keys map key ids to raw public keys."""

    hardware_roots: dict[bytes, bytes] = field(default_factory=dict)
    allowed_digests: dict[str, frozenset[bytes]] = field(default_factory=dict)
    endorsers: dict[bytes, bytes] = field(default_factory=dict)
    log_keys: dict[bytes, bytes] = field(default_factory=dict)
    require_inclusion_proofs: bool = False
    checked_layers: tuple[str, ...] = LAYERS
    allowed_policy_digests: frozenset[bytes] = frozenset()

    def __post_init__(self):
        for layer in self.checked_layers:
            if layer not in LAYERS:
                raise ValueError(f"unknown layer {layer!r}")
            if not self.allowed_digests.get(layer) and not self.endorsers:
                raise ValueError(f"layer {layer!r} is checked but nothing can satisfy it")
        if self.require_inclusion_proofs and not self.log_keys:
            raise ValueError("inclusion proofs required but no log key configured")

    @classmethod
    def build(cls, *, hardware_roots: Iterable[bytes] = (), allowed: dict[str, Iterable[bytes]] | None = None,
              endorsers: Iterable[bytes] = (), log_keys: Iterable[bytes] = (), **kw) -> "ReferenceValues":
        """Convenience constructor from raw public keys and digest iterables."""
        return cls(
            hardware_roots={canonical.key_id(k): k for k in hardware_roots},
            allowed_digests={layer: frozenset(v) for layer, v in (allowed or {}).items()},
            endorsers={canonical.key_id(k): k for k in endorsers},
            log_keys={canonical.key_id(k): k for k in log_keys},
            **kw,
        )

    def to_dict(self) -> dict:
        return {
            "hardware_roots": sorted(self.hardware_roots.values()),
            "allowed_digests": {k: sorted(v) for k, v in self.allowed_digests.items()},
            "endorsers": sorted(self.endorsers.values()),
            "log_keys": sorted(self.log_keys.values()),
            "require_inclusion_proofs": self.require_inclusion_proofs,
            "checked_layers": list(self.checked_layers),
            "allowed_policy_digests": sorted(self.allowed_policy_digests),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceValues":
        return cls.build(
            hardware_roots=[b64d(k) for k in d.get("hardware_roots", [])],
            allowed={k: [b64d(x) for x in v] for k, v in d.get("allowed_digests", {}).items()},
            endorsers=[b64d(k) for k in d.get("endorsers", [])],
            log_keys=[b64d(k) for k in d.get("log_keys", [])],
            require_inclusion_proofs=bool(d.get("require_inclusion_proofs", False)),
            checked_layers=tuple(d.get("checked_layers", LAYERS)),
            allowed_policy_digests=frozenset(b64d(x) for x in d.get("allowed_policy_digests", [])),
        )


def check_inclusion(e: Endorsement, rv: ReferenceValues) -> bool:
    """Endorsement carries a proof against a head signed by an accepted log."""
    if e.inclusion is None:
        return False
    log_key = rv.log_keys.get(e.inclusion.head.log_key_id)
    if log_key is None:
        return False
    return verify_inclusion(e, e.inclusion.proof, e.inclusion.head, log_key)


def check_endorsed(digest: bytes, kind: SubjectKind, endorsements: Iterable[Endorsement],
                   rv: ReferenceValues, layer: str) -> None:
    """Raise unless an allowed endorser validly endorsed ``digest``.

    Among several candidate endorsements one valid one suffices; the error
    reported otherwise is the most specific failure seen.
    """
    failure: Exception | None = None
    for e in endorsements:
        if e.subject_digest != digest or SubjectKind(e.subject_kind) != kind:
            continue
        key = rv.endorsers.get(e.signer_key_id)
        if key is None:
            continue
        if not verify_endorsement(e, key):
            failure = BadEndorsementSignature("endorsement signature invalid", layer)
            continue
        if rv.require_inclusion_proofs and not check_inclusion(e, rv):
            failure = failure or MissingInclusionProof("endorsement lacks a valid inclusion proof", layer)
            continue
        return
    raise failure or DigestNotAllowed("digest neither allowlisted nor endorsed by an allowed signer", layer)


def verify_evidence(ev: AttestationEvidence, rv: ReferenceValues,
                    endorsements: Sequence[Endorsement] = ()) -> VerifiedIdentity:
    root = rv.hardware_roots.get(ev.root_key_id)
    if root is None:
        raise BrokenChain("evidence not rooted in an accepted hardware root", LAYERS[0])
    if len(ev.layer_public_keys) != len(LAYERS) - 1 or len(ev.signatures) != len(LAYERS):
        raise BrokenChain("malformed certificate chain", LAYERS[0])
    signer_keys = [root] + list(ev.layer_public_keys)
    for layer, key, sig, stmt in zip(LAYERS, signer_keys, ev.signatures,
                                     _statements(ev.chain, ev.layer_public_keys, ev.app_public_keys)):
        if not ed25519_verify(key, sig, stmt):
            raise BrokenChain("signature does not verify", layer)
    for layer in rv.checked_layers:
        digest = ev.chain.digest(layer)
        if digest in rv.allowed_digests.get(layer, ()):
            continue
        check_endorsed(digest, SubjectKind.BINARY, endorsements, rv, layer)
    return VerifiedIdentity(ev.chain, ev.app_public_keys)


@dataclass(frozen=True)
class Platform:
    """A simulated TEE host: hardware root plus the firmware/kernel it boots."""

    hardware_root: Ed25519PrivateKey
    firmware: bytes = b"cfc-sim-firmware/1"
    kernel: bytes = b"cfc-sim-kernel/1"

    @property
    def root_public_key(self) -> bytes:
        return raw_public(self.hardware_root)

    def measure(self, application: bytes, config: bytes) -> MeasurementChain:
        return MeasurementChain.measure(self.firmware, self.kernel, application, config)

    def attest(self, application: bytes, config: bytes, app_keys: AppPublicKeys) -> AttestationEvidence:
        return generate_evidence(self.measure(application, config), app_keys, self.hardware_root)
