"""Append-only Merkle log of endorsements.

Tree hashing follows RFC 6962/9162: leaves are ``SHA-256(0x00 || data)`` and
interior nodes ``SHA-256(0x01 || left || right)``, with the split point at the
largest power of two strictly below the subtree size.  Proof verification uses
the iterative RFC 9162 algorithms, which are independent of the recursive
proof generation here.

The log operator holds its own Ed25519 key, distinct from every service
provider key, and signs each tree head.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from . import canonical
from .errors import OutOfRange

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"
EMPTY_ROOT = hashlib.sha256(b"").digest()


class Loggable(Protocol):
    signer_key_id: bytes

    def leaf_bytes(self) -> bytes: ...

    def to_dict(self) -> dict: ...


def hash_leaf(data: bytes) -> bytes:
    return hashlib.sha256(LEAF_PREFIX + data).digest()


def hash_children(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(NODE_PREFIX + left + right).digest()


def _split(n: int) -> int:
    """Largest power of two strictly less than ``n`` (``n >= 2``)."""
    k = 1
    while k << 1 < n:
        k <<= 1
    return k


def merkle_root(leaf_hashes: Sequence[bytes]) -> bytes:
    n = len(leaf_hashes)
    if n == 0:
        return EMPTY_ROOT
    if n == 1:
        return leaf_hashes[0]
    k = _split(n)
    return hash_children(merkle_root(leaf_hashes[:k]), merkle_root(leaf_hashes[k:]))


def _inclusion_path(m: int, leaves: Sequence[bytes]) -> list[bytes]:
    n = len(leaves)
    if n <= 1:
        return []
    k = _split(n)
    if m < k:
        return _inclusion_path(m, leaves[:k]) + [merkle_root(leaves[k:])]
    return _inclusion_path(m - k, leaves[k:]) + [merkle_root(leaves[:k])]


def _subproof(m: int, leaves: Sequence[bytes], complete: bool) -> list[bytes]:
    n = len(leaves)
    if m == n:
        return [] if complete else [merkle_root(leaves)]
    k = _split(n)
    if m <= k:
        return _subproof(m, leaves[:k], complete) + [merkle_root(leaves[k:])]
    return _subproof(m - k, leaves[k:], False) + [merkle_root(leaves[:k])]


def consistency_path(old_size: int, leaves: Sequence[bytes]) -> list[bytes]:
    if old_size == 0 or old_size == len(leaves):
        return []
    return _subproof(old_size, leaves, True)


def root_from_inclusion(leaf_hash: bytes, index: int, tree_size: int, path: Sequence[bytes]) -> bytes | None:
    """RFC 9162 section 2.1.3.2; returns ``None`` when the path shape is wrong."""
    if index >= tree_size:
        return None
    fn, sn = index, tree_size - 1
    r = leaf_hash
    for p in path:
        if sn == 0:
            return None
        if fn & 1 or fn == sn:
            r = hash_children(p, r)
            if not fn & 1:
                while fn and not fn & 1:
                    fn >>= 1
                    sn >>= 1
        else:
            r = hash_children(r, p)
        fn >>= 1
        sn >>= 1
    if sn != 0:
        return None
    return r


def check_consistency(old_size: int, old_root: bytes, new_size: int, new_root: bytes,
                      path: Sequence[bytes]) -> bool:
    """RFC 9162 section 2.1.4.2."""
    if old_size > new_size:
        return False
    if old_size == new_size:
        return not path and old_root == new_root
    if old_size == 0:
        return not path
    path = list(path)
    if not path:
        return False
    if old_size & (old_size - 1) == 0:  # power of two: old root is the first node
        path = [old_root] + path
    fn, sn = old_size - 1, new_size - 1
    while fn & 1:
        fn >>= 1
        sn >>= 1
    fr = sr = path[0]
    for c in path[1:]:
        if sn == 0:
            return False
        if fn & 1 or fn == sn:
            fr = hash_children(c, fr)
            sr = hash_children(c, sr)
            if not fn & 1:
                while fn and not fn & 1:
                    fn >>= 1
                    sn >>= 1
        else:
            sr = hash_children(sr, c)
        fn >>= 1
        sn >>= 1
    return sn == 0 and fr == old_root and sr == new_root


# ---------------------------------------------------------------------------
# Signed structures
# ---------------------------------------------------------------------------

def _raw_public(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


@dataclass(frozen=True)
class SignedTreeHead:
    tree_size: int
    root_hash: bytes
    log_key_id: bytes
    signature: bytes

    def signed_bytes(self) -> bytes:
        return canonical.dumpb({"tree_size": self.tree_size, "root_hash": self.root_hash,
                                "log_key_id": self.log_key_id})

    def verify(self, log_public_key: bytes) -> bool:
        if canonical.key_id(log_public_key) != self.log_key_id:
            return False
        try:
            Ed25519PublicKey.from_public_bytes(log_public_key).verify(self.signature, self.signed_bytes())
        except (InvalidSignature, ValueError):
            return False
        return True

    def to_dict(self) -> dict:
        return {"tree_size": self.tree_size, "root_hash": self.root_hash,
                "log_key_id": self.log_key_id, "signature": self.signature}

    @classmethod
    def from_dict(cls, d: dict) -> "SignedTreeHead":
        return cls(int(d["tree_size"]), canonical.b64d(d["root_hash"]),
                   canonical.b64d(d["log_key_id"]), canonical.b64d(d["signature"]))


@dataclass(frozen=True)
class InclusionProof:
    index: int
    tree_size: int
    path: tuple[bytes, ...]

    def to_dict(self) -> dict:
        return {"index": self.index, "tree_size": self.tree_size, "path": list(self.path)}

    @classmethod
    def from_dict(cls, d: dict) -> "InclusionProof":
        return cls(int(d["index"]), int(d["tree_size"]), tuple(canonical.b64d(p) for p in d["path"]))


@dataclass(frozen=True)
class LogEntry:
    index: int
    endorsement: Any
    leaf_hash: bytes


def verify_inclusion(entry: Loggable | bytes, proof: InclusionProof, head: SignedTreeHead,
                     log_public_key: bytes | None = None) -> bool:
    """True iff ``entry`` is at ``proof.index`` of the tree ``head`` commits to.

    ``entry`` is an endorsement-like object or its raw leaf bytes.  When
    ``log_public_key`` is given the head signature is checked too.
    """
    if log_public_key is not None and not head.verify(log_public_key):
        return False
    if proof.tree_size != head.tree_size:
        return False
    data = entry if isinstance(entry, (bytes, bytearray)) else entry.leaf_bytes()
    root = root_from_inclusion(hash_leaf(bytes(data)), proof.index, proof.tree_size, proof.path)
    return root is not None and root == head.root_hash


def verify_consistency(old_head: SignedTreeHead, new_head: SignedTreeHead, path: Sequence[bytes],
                       log_public_key: bytes | None = None) -> bool:
    if log_public_key is not None and not (old_head.verify(log_public_key) and new_head.verify(log_public_key)):
        return False
    return check_consistency(old_head.tree_size, old_head.root_hash, new_head.tree_size,
                             new_head.root_hash, path)


class TransparencyLog:
    """In-process append-only log.  Appends are serialized by one lock."""

    def __init__(self, operator_key: Ed25519PrivateKey | None = None):
        self._key = operator_key or Ed25519PrivateKey.generate()
        self.public_key = _raw_public(self._key)
        self.key_id = canonical.key_id(self.public_key)
        self._entries: list[LogEntry] = []
        self._leaves: list[bytes] = []
        self._lock = threading.Lock()

    @property
    def size(self) -> int:
        return len(self._leaves)

    def _sign_head(self, size: int) -> SignedTreeHead:
        root = merkle_root(self._leaves[:size])
        unsigned = SignedTreeHead(size, root, self.key_id, b"")
        return SignedTreeHead(size, root, self.key_id, self._key.sign(unsigned.signed_bytes()))

    def append(self, endorsement: Loggable) -> tuple[int, SignedTreeHead]:
        leaf = hash_leaf(endorsement.leaf_bytes())
        with self._lock:
            index = len(self._leaves)
            self._leaves.append(leaf)
            self._entries.append(LogEntry(index, endorsement, leaf))
            return index, self._sign_head(index + 1)

    def head(self, tree_size: int | None = None) -> SignedTreeHead:
        size = self.size if tree_size is None else tree_size
        if not 0 <= size <= self.size:
            raise OutOfRange(f"tree_size {size} outside [0, {self.size}]")
        return self._sign_head(size)

    def prove_inclusion(self, index: int, tree_size: int | None = None) -> InclusionProof:
        size = self.size if tree_size is None else tree_size
        if not 0 <= index < size <= self.size:
            raise OutOfRange(f"index {index}, tree_size {size}, log size {self.size}")
        return InclusionProof(index, size, tuple(_inclusion_path(index, self._leaves[:size])))

    def prove_consistency(self, old_size: int, new_size: int | None = None) -> list[bytes]:
        new = self.size if new_size is None else new_size
        if not 0 <= old_size <= new <= self.size:
            raise OutOfRange(f"old {old_size}, new {new}, log size {self.size}")
        return consistency_path(old_size, self._leaves[:new])

    def entries(self) -> list[LogEntry]:
        return list(self._entries)

    def monitor_by_signer(self, signer_key_id: bytes) -> list[LogEntry]:
        return [e for e in self._entries if e.endorsement.signer_key_id == signer_key_id]

    def snapshot(self) -> "LogSnapshot":
        return LogSnapshot(self.public_key, [e.endorsement for e in self._entries], self.head())


@dataclass
class LogSnapshot:
    """Exported, read-only view of a log for offline auditors."""

    log_public_key: bytes
    endorsements: list = field(default_factory=list)
    head: SignedTreeHead | None = None

    def leaf_hashes(self) -> list[bytes]:
        return [hash_leaf(e.leaf_bytes()) for e in self.endorsements]

    def is_consistent(self) -> bool:
        """Head is signed by the operator and commits to exactly these entries."""
        if self.head is None:
            return not self.endorsements
        return (self.head.verify(self.log_public_key)
                and self.head.tree_size == len(self.endorsements)
                and merkle_root(self.leaf_hashes()) == self.head.root_hash)

    def contains(self, endorsement: Loggable) -> bool:
        leaf = endorsement.leaf_bytes()
        return any(e.leaf_bytes() == leaf for e in self.endorsements)

    def monitor_by_signer(self, signer_key_id: bytes) -> list[LogEntry]:
        return [LogEntry(i, e, hash_leaf(e.leaf_bytes()))
                for i, e in enumerate(self.endorsements) if e.signer_key_id == signer_key_id]

    def to_dict(self) -> dict:
        return {
            "log_public_key": self.log_public_key,
            "entries": [e.to_dict() for e in self.endorsements],
            "head": None if self.head is None else self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogSnapshot":
        from .attestation import Endorsement  # avoid import cycle

        head = d.get("head")
        return cls(
            canonical.b64d(d["log_public_key"]),
            [Endorsement.from_dict(e) for e in d.get("entries", [])],
            None if head is None else SignedTreeHead.from_dict(head),
        )
