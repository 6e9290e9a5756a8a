"""Two-layer envelope encryption and the ``.cfcb`` blob wire format.

A payload is sealed with AES-256-GCM under a fresh 32-byte data key; the data
key is then wrapped to a ledger X25519 public key with single-shot HPKE whose
context binds the access-policy digest.  The serialized header (everything but
the ciphertext) is the AEAD associated data of the payload, so any header edit
makes the payload undecryptable.

Wire layout (integers little-endian)::

    magic "CFCB" | version u8 | blob_id[16] | ledger_key_id[16] | policy_digest[32]
    | u32 len | encapsulated_key | u32 len | wrapped_data_key | aead_nonce[12]
    | ciphertext ...
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Callable

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hpke
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthFailure, BadMagic, MalformedKey, Truncated, UnsupportedVersion

MAGIC = b"CFCB"
VERSION = 1
FILE_EXTENSION = ".cfcb"

DATA_KEY_LEN = 32
NONCE_LEN = 12
ID_LEN = 16
DIGEST_LEN = 32
_FIXED_PREFIX = len(MAGIC) + 1 + ID_LEN + ID_LEN + DIGEST_LEN
_ENC_LEN = 32  # X25519 encapsulated key

_SUITE = hpke.Suite(hpke.KEM.X25519, hpke.KDF.HKDF_SHA256, hpke.AEAD.AES_256_GCM)

RandomSource = Callable[[int], bytes]


# ---------------------------------------------------------------------------
# HPKE helpers
# ---------------------------------------------------------------------------

def load_public_key(key: bytes | X25519PublicKey) -> X25519PublicKey:
    if isinstance(key, X25519PublicKey):
        return key
    if not isinstance(key, (bytes, bytearray)) or len(key) != 32:
        raise MalformedKey("X25519 public key must be 32 raw bytes")
    try:
        return X25519PublicKey.from_public_bytes(bytes(key))
    except ValueError as exc:
        raise MalformedKey(str(exc)) from exc


def seal(public_key: bytes | X25519PublicKey, plaintext: bytes, context: bytes) -> tuple[bytes, bytes]:
    """Single-shot HPKE seal; returns ``(encapsulated_key, ciphertext)``."""
    pk = load_public_key(public_key)
    try:
        out = _SUITE.encrypt(plaintext, pk, info=context)
    except ValueError as exc:  # low-order points and the like
        raise MalformedKey(str(exc)) from exc
    return out[:_ENC_LEN], out[_ENC_LEN:]


def open_sealed(private_key: X25519PrivateKey, encapsulated_key: bytes, ciphertext: bytes, context: bytes) -> bytes:
    try:
        return _SUITE.decrypt(encapsulated_key + ciphertext, private_key, info=context)
    except (InvalidTag, ValueError) as exc:
        raise AuthFailure("HPKE open failed") from exc


def wrap_context(policy_digest: bytes, stage: int = 0) -> bytes:
    """Context bound into the data-key wrap.

    Uploads (stage 0) bind exactly the policy digest; derived blobs also bind
    the policy node they live at, so an orchestrator cannot present derived
    data as if it were fresh client input.
    """
    if stage == 0:
        return bytes(policy_digest)
    return bytes(policy_digest) + struct.pack("<I", stage)


# ---------------------------------------------------------------------------
# Header and blob
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlobHeader:
    blob_id: bytes
    ledger_key_id: bytes
    policy_digest: bytes
    encapsulated_key: bytes
    wrapped_data_key: bytes
    aead_nonce: bytes
    magic: bytes = MAGIC
    version: int = VERSION

    def __post_init__(self):
        for name, size in (("blob_id", ID_LEN), ("ledger_key_id", ID_LEN),
                           ("policy_digest", DIGEST_LEN), ("aead_nonce", NONCE_LEN)):
            if len(getattr(self, name)) != size:
                raise ValueError(f"{name} must be {size} bytes")


def serialize_header(h: BlobHeader) -> bytes:
    return b"".join((
        h.magic,
        struct.pack("<B", h.version),
        h.blob_id,
        h.ledger_key_id,
        h.policy_digest,
        struct.pack("<I", len(h.encapsulated_key)),
        h.encapsulated_key,
        struct.pack("<I", len(h.wrapped_data_key)),
        h.wrapped_data_key,
        h.aead_nonce,
    ))


def _parse(b: bytes) -> tuple[BlobHeader, int]:
    if len(b) < len(MAGIC):
        raise Truncated("shorter than magic")
    if b[:4] != MAGIC:
        raise BadMagic(f"bad magic {b[:4]!r}")
    if len(b) < 5:
        raise Truncated("missing version")
    if b[4] != VERSION:
        raise UnsupportedVersion(f"version {b[4]}")
    if len(b) < _FIXED_PREFIX:
        raise Truncated(f"need {_FIXED_PREFIX} bytes of fixed header, got {len(b)}")
    pos = 5
    blob_id = b[pos:pos + ID_LEN]; pos += ID_LEN
    key_id = b[pos:pos + ID_LEN]; pos += ID_LEN
    digest = b[pos:pos + DIGEST_LEN]; pos += DIGEST_LEN
    fields = []
    for name in ("encapsulated_key", "wrapped_data_key"):
        if len(b) < pos + 4:
            raise Truncated(f"missing length of {name}")
        (n,) = struct.unpack_from("<I", b, pos)
        pos += 4
        if len(b) < pos + n:
            raise Truncated(f"{name} truncated")
        fields.append(b[pos:pos + n])
        pos += n
    if len(b) < pos + NONCE_LEN:
        raise Truncated("missing aead nonce")
    nonce = b[pos:pos + NONCE_LEN]
    pos += NONCE_LEN
    header = BlobHeader(
        blob_id=blob_id, ledger_key_id=key_id, policy_digest=digest,
        encapsulated_key=fields[0], wrapped_data_key=fields[1], aead_nonce=nonce,
    )
    return header, pos


def parse_header(b: bytes) -> BlobHeader:
    return _parse(b)[0]


@dataclass(frozen=True)
class EncryptedBlob:
    header: BlobHeader
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return serialize_header(self.header) + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncryptedBlob":
        header, pos = _parse(data)
        return cls(header=header, ciphertext=bytes(data[pos:]))

    @property
    def blob_id(self) -> bytes:
        return self.header.blob_id


@dataclass(frozen=True)
class WrapRequest:
    plaintext: bytes
    policy_digest: bytes
    ledger_public_key: bytes
    ledger_key_id: bytes


def encrypt_blob(req: WrapRequest, rng: RandomSource = os.urandom, *, stage: int = 0,
                 blob_id: bytes | None = None) -> EncryptedBlob:
    """Seal ``req.plaintext`` under a fresh data key wrapped to the ledger key.

    ``stage`` is the policy node the blob belongs to; client uploads use 0.
    ``blob_id`` defaults to fresh random bytes from ``rng``.
    """
    pk = load_public_key(req.ledger_public_key)
    data_key = rng(DATA_KEY_LEN)
    enc, wrapped = seal(pk, data_key, wrap_context(req.policy_digest, stage))
    header = BlobHeader(
        blob_id=rng(ID_LEN) if blob_id is None else bytes(blob_id),
        ledger_key_id=bytes(req.ledger_key_id),
        policy_digest=bytes(req.policy_digest),
        encapsulated_key=enc,
        wrapped_data_key=wrapped,
        aead_nonce=rng(NONCE_LEN),
    )
    ct = AESGCM(data_key).encrypt(header.aead_nonce, req.plaintext, serialize_header(header))
    return EncryptedBlob(header=header, ciphertext=ct)


def unwrap_data_key(header: BlobHeader, private_key: X25519PrivateKey, policy_digest: bytes, stage: int = 0) -> bytes:
    """Decapsulate the data key; only the ledger holds ``private_key``."""
    return open_sealed(private_key, header.encapsulated_key, header.wrapped_data_key,
                       wrap_context(policy_digest, stage))


def decrypt_blob(blob: EncryptedBlob, data_key: bytes) -> bytes:
    if len(data_key) != DATA_KEY_LEN:
        raise AuthFailure("wrong data key length")
    try:
        return AESGCM(data_key).decrypt(blob.header.aead_nonce, blob.ciphertext, serialize_header(blob.header))
    except InvalidTag as exc:
        raise AuthFailure("payload authentication failed") from exc
