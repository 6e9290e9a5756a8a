"""The key ledger: TTL-bounded wrapping keys and policy-enforcing unwraps.

The ledger never sees ciphertexts.  A transform sends it the wrapped data key
from a blob header together with the full policy, its own attestation
evidence and configuration, and a fresh nonce.  When every check passes the
ledger unwraps the data key and re-seals it to the transform's attested
recipient key with the nonce as context.

Usage counters and used nonces are stored inside the key record they belong
to, so erasing a key (expiry or restart) erases the access history with it.
Resetting the history again requires losing the data.

All state changes happen under one lock, which makes the ledger a single
logical writer: concurrent callers are linearized at that lock.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import canonical
from .attestation import (
    AppPublicKeys,
    AttestationEvidence,
    Endorsement,
    Platform,
    ReferenceValues,
    ed25519_verify,
    raw_public,
    verify_evidence,
)
from .clock import Clock, system_clock
from .envelope import BlobHeader, seal, unwrap_data_key
from .errors import (
    AttestationError,
    AuthFailure,
    BadEvidence,
    BudgetExhausted,
    CfcError,
    InvalidPolicy,
    KeyExpired,
    NonceReplay,
    PolicyDigestMismatch,
    UnknownKey,
    UnwrapFailed,
)
from .policy import AccessPolicy, canonical_digest, match_edge

LEDGER_APPLICATION = b"cfc.ledger/v1"
NONCE_LEN = 16


def x25519_public(key: X25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


@dataclass
class AccessRecord:
    key_id: bytes
    blob_id: bytes
    edge_id: str
    access_count: int = 0
    nonces: set[bytes] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {"key_id": self.key_id, "blob_id": self.blob_id, "edge_id": self.edge_id,
                "access_count": self.access_count}


@dataclass
class KeyRecord:
    key_id: bytes
    private_key: X25519PrivateKey
    public_key: bytes
    issued_at: int
    expiration: int
    access: dict[tuple[bytes, str], AccessRecord] = field(default_factory=dict)

    def expired(self, now: int) -> bool:
        return now >= self.expiration


@dataclass(frozen=True)
class PublicKeyBundle:
    key_id: bytes
    public_key: bytes
    issued_at: int
    expiration: int
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return canonical.dumpb({"key_id": self.key_id, "public_key": self.public_key,
                                "issued_at": self.issued_at, "expiration": self.expiration})

    def verify(self, signing_key: bytes) -> bool:
        return (canonical.key_id(self.public_key) == self.key_id
                and ed25519_verify(signing_key, self.signature, self.signed_bytes()))

    def to_dict(self) -> dict:
        return {"key_id": self.key_id, "public_key": self.public_key, "issued_at": self.issued_at,
                "expiration": self.expiration, "signature": self.signature}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PublicKeyBundle":
        b = canonical.b64d
        return cls(b(d["key_id"]), b(d["public_key"]), int(d["issued_at"]), int(d["expiration"]),
                   b(d["signature"]))


@dataclass(frozen=True)
class AuthorizeRequest:
    """Everything the ledger needs, and deliberately no payload bytes."""

    key_id: bytes
    blob_id: bytes
    policy_digest: bytes
    encapsulated_key: bytes
    wrapped_data_key: bytes
    policy: AccessPolicy
    src_node: int
    transform_evidence: AttestationEvidence
    transform_config: Mapping[str, Any]
    nonce: bytes
    recipient_public_key: bytes
    transform_endorsements: tuple[Endorsement, ...] = ()

    @classmethod
    def for_header(cls, header: BlobHeader, **kw) -> "AuthorizeRequest":
        return cls(key_id=header.ledger_key_id, blob_id=header.blob_id, policy_digest=header.policy_digest,
                   encapsulated_key=header.encapsulated_key, wrapped_data_key=header.wrapped_data_key, **kw)


@dataclass(frozen=True)
class RewrappedKey:
    """Ledger response: the data key sealed to the transform, bound to its nonce."""

    key_id: bytes
    blob_id: bytes
    edge_id: str
    dst_node: int
    terminal: bool
    nonce: bytes
    encapsulated_key: bytes
    ciphertext: bytes
    ledger_public_key: bytes   # X25519 key of key_id, for re-encrypting derived data
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "signature"}
        return canonical.dumpb(d)


class Ledger:
    def __init__(self, platform: Platform, transform_rv: ReferenceValues, *,
                 clock: Clock = system_clock, application: bytes = LEDGER_APPLICATION):
        self._platform = platform
        self._application = application
        self.transform_rv = transform_rv
        self.config = {"kind": "ledger", "transform_reference_values": transform_rv.to_dict()}
        self._clock = clock
        self._lock = threading.RLock()
        self._keys: dict[bytes, KeyRecord] = {}
        self._last_now: int | None = None
        self._stats = Counter()
        self._denials: Counter[str] = Counter()
        self._boot()

    def _boot(self) -> None:
        self._signing_key = Ed25519PrivateKey.generate()
        self._encryption_key = X25519PrivateKey.generate()
        app_keys = AppPublicKeys(raw_public(self._signing_key), x25519_public(self._encryption_key))
        self.evidence = self._platform.attest(self._application, canonical.dumpb(self.config), app_keys)

    @property
    def config_digest(self) -> bytes:
        return canonical.digest(self.config)

    @property
    def signing_public_key(self) -> bytes:
        return self.evidence.app_public_keys.signing

    # -- clock --------------------------------------------------------------

    def _observe(self, now: int | None) -> int:
        """Monotone ledger time; regressions are clamped and counted."""
        t = self._clock() if now is None else int(now)
        if self._last_now is not None and t < self._last_now:
            self._stats["clock_regressions"] += 1
            return self._last_now
        self._last_now = t
        return t

    def _erase(self, key_id: bytes) -> None:
        rec = self._keys.pop(key_id, None)
        if rec is not None:
            rec.access.clear()
            rec.private_key = None  # drop the only reference
            self._stats["erasures"] += 1

    def advance_time(self, now: int | None = None) -> list[bytes]:
        with self._lock:
            t = self._observe(now)
            doomed = sorted(k for k, r in self._keys.items() if r.expired(t))
            for k in doomed:
                self._erase(k)
            return doomed

    # -- keys ---------------------------------------------------------------

    def create_key(self, ttl_ms: int, now: int | None = None) -> PublicKeyBundle:
        if ttl_ms <= 0:
            raise ValueError("ttl must be positive")
        with self._lock:
            t = self._observe(now)
            priv = X25519PrivateKey.generate()
            pub = x25519_public(priv)
            kid = canonical.key_id(pub)
            self._keys[kid] = KeyRecord(kid, priv, pub, t, t + int(ttl_ms))
            self._stats["keys_created"] += 1
            return self._bundle(self._keys[kid])

    def _bundle(self, rec: KeyRecord) -> PublicKeyBundle:
        unsigned = PublicKeyBundle(rec.key_id, rec.public_key, rec.issued_at, rec.expiration)
        return replace(unsigned, signature=self._signing_key.sign(unsigned.signed_bytes()))

    def public_bundle(self, key_id: bytes) -> PublicKeyBundle:
        rec = self._keys.get(key_id)
        if rec is None:
            raise UnknownKey(key_id.hex())
        return self._bundle(rec)

    def key_ids(self) -> list[bytes]:
        return sorted(self._keys)

    def restart(self) -> "Ledger":
        """Process restart: all in-memory state is gone, including every private key."""
        with self._lock:
            for k in list(self._keys):
                self._erase(k)
            self._last_now = None
            self._stats["restarts"] += 1
            self._boot()
            return self

    # -- authorization ------------------------------------------------------

    def _deny(self, exc: CfcError) -> CfcError:
        self._denials[exc.cause] += 1
        return exc

    def _check_transform(self, req: AuthorizeRequest):
        try:
            identity = verify_evidence(req.transform_evidence, self.transform_rv, req.transform_endorsements)
        except AttestationError as exc:
            raise BadEvidence(f"transform evidence rejected: {exc}") from exc
        if identity.chain.config_digest != canonical.digest(dict(req.transform_config)):
            raise BadEvidence("transform config does not match the attested config digest")
        if identity.app_public_keys.encryption != req.recipient_public_key:
            raise BadEvidence("recipient key is not the attested transform key")
        return identity

    def authorize_access(self, req: AuthorizeRequest, now: int | None = None) -> RewrappedKey:
        with self._lock:
            try:
                return self._authorize(req, now)
            except CfcError as exc:
                raise self._deny(exc)

    def _authorize(self, req: AuthorizeRequest, now: int | None) -> RewrappedKey:
        t = self._observe(now)
        rec = self._keys.get(req.key_id)
        if rec is None:
            raise UnknownKey(f"key {req.key_id.hex()} unknown or erased")
        if rec.expired(t):
            self._erase(req.key_id)
            raise KeyExpired(f"key {req.key_id.hex()} expired at {rec.expiration}")
        try:
            digest = canonical_digest(req.policy)
        except InvalidPolicy as exc:
            raise PolicyDigestMismatch(f"supplied policy is invalid: {exc}") from exc
        if digest != req.policy_digest:
            raise PolicyDigestMismatch("supplied policy does not hash to the blob's policy digest")
        if len(req.nonce) != NONCE_LEN:
            raise NonceReplay("nonce must be 16 bytes")
        identity = self._check_transform(req)
        edge = match_edge(req.policy, req.src_node, identity, req.transform_config)
        acc = rec.access.get((req.blob_id, edge.edge_id))
        if acc is not None and acc.access_count >= edge.usage_limit:
            raise BudgetExhausted(f"blob {req.blob_id.hex()} used {acc.access_count}/{edge.usage_limit} "
                                  f"times on edge {edge.edge_id}")
        if acc is not None and req.nonce in acc.nonces:
            raise NonceReplay("nonce already used for this blob and edge")
        try:
            data_key = unwrap_data_key(
                BlobHeader(req.blob_id, req.key_id, req.policy_digest, req.encapsulated_key,
                           req.wrapped_data_key, bytes(12)),
                rec.private_key, req.policy_digest, req.src_node)
        except (AuthFailure, ValueError) as exc:
            raise UnwrapFailed("wrapped key does not open for this key, policy and node") from exc
        enc, ct = seal(req.recipient_public_key, data_key, req.nonce)
        if acc is None:
            acc = rec.access[(req.blob_id, edge.edge_id)] = AccessRecord(req.key_id, req.blob_id, edge.edge_id)
        acc.access_count += 1
        acc.nonces.add(req.nonce)
        self._stats["authorizations"] += 1
        unsigned = RewrappedKey(req.key_id, req.blob_id, edge.edge_id, edge.dst_node, edge.terminal,
                                req.nonce, enc, ct, rec.public_key)
        return replace(unsigned, signature=self._signing_key.sign(unsigned.signed_bytes()))

    # -- introspection ------------------------------------------------------

    def access_count(self, blob_id: bytes, edge_id: str) -> int:
        with self._lock:
            return sum(r.access[(blob_id, edge_id)].access_count
                       for r in self._keys.values() if (blob_id, edge_id) in r.access)

    def stats(self) -> dict:
        with self._lock:
            return {
                "authorizations": self._stats["authorizations"],
                "denials": dict(sorted(self._denials.items())),
                "erasures": self._stats["erasures"],
                "clock_regressions": self._stats["clock_regressions"],
                "keys_created": self._stats["keys_created"],
                "restarts": self._stats["restarts"],
                "live_keys": len(self._keys),
            }

    def debug_dump(self) -> str:
        """Counts and key ids only; never private material."""
        with self._lock:
            keys = [{
                "key_id": r.key_id,
                "issued_at": r.issued_at,
                "expiration": r.expiration,
                "access": sorted((a.to_dict() for a in r.access.values()),
                                 key=lambda a: (a["blob_id"], a["edge_id"])),
            } for r in sorted(self._keys.values(), key=lambda r: r.key_id)]
            return canonical.dumps({"keys": keys, "stats": self.stats()})

