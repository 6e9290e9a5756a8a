"""Untrusted orchestration over trusted transforms.

A :class:`TrustedTransform` stands for one TEE instance.  Its recipient
private key, decrypted payloads and nonce bookkeeping never cross its public
methods; the orchestrator only ever handles :class:`StagedBlob` ciphertexts,
authorization messages it relays to the ledger, and terminal releases.

Derived data produced by a non-terminal stage is re-encrypted under the same
ledger key and policy digest as its input, with the destination node bound
into the wrap, so it is erased together with the source key.
"""

from __future__ import annotations

import copy
import hashlib
import os
import pickle
import threading
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from . import aggcore, canonical
from .aggcore import ClientTable, Randomness, ReleasedHistogram
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
from .dpquery import DpQueryConfig
from .envelope import EncryptedBlob, WrapRequest, decrypt_blob, encrypt_blob, open_sealed
from .errors import (
    AttestationError,
    BadLedgerResponse,
    CfcError,
    DimensionMismatch,
    FunctionMisbehavior,
    NonceReplayDetected,
    ReleaseForbidden,
    StageFailed,
    TransformCrashed,
    BudgetExhausted,
)
from .ledger import NONCE_LEN, AuthorizeRequest, Ledger, RewrappedKey, x25519_public
from .policy import AccessPolicy, topological_nodes

SELECT = "cfc.transform.select/v1"
PHH = "cfc.transform.phh/v1"
DP_VECTOR_SUM = "cfc.transform.dp_vector_sum/v1"
RELEASING = frozenset({PHH, DP_VECTOR_SUM})


def application_digest(behavior: str) -> bytes:
    """Attested application digest of a registered transform behavior."""
    return hashlib.sha256(behavior.encode()).digest()


# ---------------------------------------------------------------------------
# Per-user functions
# ---------------------------------------------------------------------------

PerUserFunction = Callable[[Mapping, Any], Any]
PER_USER_FUNCTIONS: dict[str, PerUserFunction] = {}


def register_per_user_function(name: str):
    def deco(fn: PerUserFunction) -> PerUserFunction:
        PER_USER_FUNCTIONS[name] = fn
        return fn
    return deco


@register_per_user_function("identity")
def _identity(record: Mapping, public_state: Any) -> Mapping:
    return record


def run_per_user_function(f: PerUserFunction, record: Mapping, public_state: Any = None) -> Mapping:
    """Apply ``f`` to one user's record in a forked child.

    The child is discarded after each call, so globals, closures, function
    attributes and anything else ``f`` mutates are gone by the next user.
    """
    r, w = os.pipe()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DeprecationWarning)  # fork with live threads
        pid = os.fork()
    if pid == 0:  # pragma: no cover - runs in the child
        try:
            os.close(r)
            try:
                payload = pickle.dumps(("ok", f(copy.deepcopy(record), public_state)))
            except BaseException as exc:  # noqa: BLE001 - report, never propagate
                payload = pickle.dumps(("error", f"{type(exc).__name__}: {exc}"))
            with os.fdopen(w, "wb") as fh:
                fh.write(payload)
        finally:
            os._exit(0)
    os.close(w)
    with os.fdopen(r, "rb") as fh:
        data = fh.read()
    os.waitpid(pid, 0)
    if not data:
        raise FunctionMisbehavior("per-user function died without output")
    status, out = pickle.loads(data)
    if status != "ok":
        raise FunctionMisbehavior(f"per-user function raised {out}")
    if not isinstance(out, Mapping):
        n = len(out) if isinstance(out, (list, tuple)) else "non-record"
        raise FunctionMisbehavior(f"per-user function must emit exactly one record, emitted {n}")
    return out


# ---------------------------------------------------------------------------
# Specs and stage values
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransformSpec:
    behavior: str
    config: Mapping[str, Any]

    @property
    def terminal(self) -> bool:
        return self.behavior in RELEASING

    @property
    def application_digest(self) -> bytes:
        return application_digest(self.behavior)

    @property
    def config_digest(self) -> bytes:
        return canonical.digest(dict(self.config))

    @classmethod
    def select(cls, key_columns: Sequence[str], value_columns: Sequence[str],
               per_user_function: str | None = None) -> "TransformSpec":
        return cls(SELECT, {"kind": "select", "key_columns": list(key_columns),
                            "value_columns": list(value_columns), "per_user_function": per_user_function})

    @classmethod
    def phh(cls, cfg: DpQueryConfig) -> "TransformSpec":
        return cls(PHH, cfg.to_dict())

    @classmethod
    def dp_vector_sum(cls, l2_clip: float, epsilon: float, delta: float, dimension: int) -> "TransformSpec":
        return cls(DP_VECTOR_SUM, {"kind": "dp_vector_sum", "l2_clip": float(l2_clip), "epsilon": float(epsilon),
                                   "delta": float(delta), "dimension": int(dimension)})

    def to_dict(self) -> dict:
        return {"behavior": self.behavior, "config": dict(self.config)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TransformSpec":
        return cls(d["behavior"], dict(d["config"]))


@dataclass(frozen=True)
class StagedBlob:
    """A ciphertext plus the policy node it lives at (orchestrator-visible)."""

    blob: EncryptedBlob
    node: int = 0

    @property
    def blob_id(self) -> bytes:
        return self.blob.blob_id


@dataclass(frozen=True)
class ReleasedVector:
    values: tuple[float, ...]
    clients: int

    def to_dict(self) -> dict:
        return {"values": list(self.values), "clients": self.clients}


Release = ReleasedHistogram | ReleasedVector


@dataclass
class StageOutput:
    blobs: list[StagedBlob] = field(default_factory=list)
    release: Release | None = None
    failures: dict[str, CfcError] = field(default_factory=dict)
    authorized: int = 0
    edge_id: str | None = None


# ---------------------------------------------------------------------------
# Trusted transform
# ---------------------------------------------------------------------------

class TrustedTransform:
    def __init__(self, spec: TransformSpec, platform: Platform, ledger_rv: ReferenceValues, *,
                 endorsements: Iterable[Endorsement] = (), ledger_endorsements: Iterable[Endorsement] = (),
                 rng: Randomness | None = None):
        self.spec = spec
        self._recipient = X25519PrivateKey.generate()
        self._signing = Ed25519PrivateKey.generate()
        self.recipient_public_key = x25519_public(self._recipient)
        keys = AppPublicKeys(raw_public(self._signing), self.recipient_public_key)
        self.evidence: AttestationEvidence = platform.attest(spec.behavior.encode(),
                                                             canonical.dumpb(dict(spec.config)), keys)
        self.endorsements = tuple(endorsements)
        self._ledger_rv = ledger_rv
        self._ledger_endorsements = tuple(ledger_endorsements)
        self._trusted_ledgers: dict[bytes, bytes] = {}
        self._pending: set[bytes] = set()
        self._consumed: set[bytes] = set()
        self._lock = threading.Lock()
        self._rng = rng or Randomness.production()
        self._ids = self._rng.child("blob-ids")
        self._runs = 0
        self.fault: str | None = None  # test hook, e.g. "crash_after_authorization"

    def __repr__(self) -> str:
        return f"TrustedTransform({self.spec.behavior})"

    # -- ledger trust ---------------------------------------------------------

    def _ledger_signing_key(self, evidence: AttestationEvidence) -> bytes:
        tag = canonical.digest(evidence)
        key = self._trusted_ledgers.get(tag)
        if key is None:
            try:
                key = verify_evidence(evidence, self._ledger_rv, self._ledger_endorsements).app_public_keys.signing
            except AttestationError as exc:
                raise BadLedgerResponse(f"ledger evidence rejected: {exc}") from exc
            self._trusted_ledgers[tag] = key
        return key

    # -- authorization protocol ----------------------------------------------

    def request_authorization(self, staged: StagedBlob, policy: AccessPolicy) -> AuthorizeRequest:
        nonce = os.urandom(NONCE_LEN)
        with self._lock:
            while nonce in self._pending or nonce in self._consumed:
                nonce = os.urandom(NONCE_LEN)
            self._pending.add(nonce)
        return AuthorizeRequest.for_header(
            staged.blob.header, policy=policy, src_node=staged.node, transform_evidence=self.evidence,
            transform_config=dict(self.spec.config), nonce=nonce, recipient_public_key=self.recipient_public_key,
            transform_endorsements=self.endorsements)

    def open_authorization(self, staged: StagedBlob, resp: RewrappedKey,
                           ledger_evidence: AttestationEvidence) -> tuple[bytes, RewrappedKey]:
        """Check a relayed ledger response and return ``(payload, response)``."""
        signing = self._ledger_signing_key(ledger_evidence)
        if not ed25519_verify(signing, resp.signature, resp.signed_bytes()):
            raise BadLedgerResponse("response not signed by the attested ledger")
        with self._lock:
            if resp.nonce in self._consumed:
                raise NonceReplayDetected("authorization response nonce already consumed")
            if resp.nonce not in self._pending:
                raise BadLedgerResponse("response answers no request of this transform")
            self._pending.discard(resp.nonce)
            self._consumed.add(resp.nonce)
        header = staged.blob.header
        if resp.blob_id != header.blob_id or resp.key_id != header.ledger_key_id:
            raise BadLedgerResponse("response is for a different blob")
        data_key = open_sealed(self._recipient, resp.encapsulated_key, resp.ciphertext, resp.nonce)
        return decrypt_blob(staged.blob, data_key), resp

    # -- behaviors -----------------------------------------------------------

    def _select(self, table: ClientTable) -> ClientTable:
        cfg = self.spec.config
        projected = project(table, cfg["key_columns"], cfg["value_columns"])
        name = cfg.get("per_user_function")
        if name is None:
            return projected
        fn = PER_USER_FUNCTIONS.get(name)
        if fn is None:
            raise FunctionMisbehavior(f"per-user function {name!r} is not registered")
        out = run_per_user_function(fn, projected.to_dict())
        try:
            return ClientTable.from_dict(out)
        except CfcError as exc:
            raise FunctionMisbehavior(f"per-user function emitted a malformed record: {exc}") from exc

    def _release(self, tables: list[tuple[str, ClientTable]], rng: Randomness,
                 failures: dict[str, CfcError]) -> Release | None:
        if not tables:
            return None
        cfg = self.spec.config
        if self.spec.behavior == PHH:
            return aggcore.private_heavy_hitters(tables, DpQueryConfig.from_dict(cfg), rng)
        updates = []
        for cid, t in tables:
            if len(t.value_columns) != cfg["dimension"]:
                failures[cid] = DimensionMismatch(f"update has {len(t.value_columns)} coordinates")
                continue
            updates.append((cid, np.sum([v for _, v in t.rows], axis=0) if t.rows else np.zeros(cfg["dimension"])))
        if not updates:
            return None
        total = aggcore.dp_vector_sum(updates, cfg["l2_clip"], cfg["epsilon"], cfg["delta"], rng,
                                      dimension=cfg["dimension"])
        return ReleasedVector(tuple(float(x) for x in total), len(updates))

    # -- stage ---------------------------------------------------------------

    def process(self, blobs: Sequence[StagedBlob], ledger: Ledger, policy: AccessPolicy,
                relay: Callable[[AuthorizeRequest], RewrappedKey] | None = None) -> StageOutput:
        """Authorize, decrypt and transform every blob; see :func:`process_stage`."""
        relay = relay or ledger.authorize_access
        out = StageOutput()
        opened: list[tuple[StagedBlob, bytes, RewrappedKey]] = []
        for staged in sorted(blobs, key=lambda s: s.blob_id):
            cid = staged.blob_id.hex()
            try:
                resp = relay(self.request_authorization(staged, policy))
                payload, resp = self.open_authorization(staged, resp, ledger.evidence)
                opened.append((staged, payload, resp))
            except CfcError as exc:
                out.failures[cid] = exc
        out.authorized = len(opened)
        if self.fault == "crash_after_authorization" and opened:
            raise TransformCrashed(f"{self.spec.behavior} crashed after {len(opened)} authorization(s)")
        edges = {resp.edge_id for _, _, resp in opened}
        if len(edges) > 1:
            raise BadLedgerResponse(f"one stage matched several edges: {sorted(edges)}")
        out.edge_id = next(iter(edges), None)

        self._runs += 1
        if self.spec.terminal:
            if any(not resp.terminal for _, _, resp in opened):
                raise ReleaseForbidden(f"edge {out.edge_id} is not terminal; {self.spec.behavior} may not release")
            tables = []
            for staged, payload, _ in opened:
                try:
                    tables.append((staged.blob_id.hex(), ClientTable.from_dict(canonical.loads(payload))))
                except (CfcError, ValueError) as exc:
                    out.failures[staged.blob_id.hex()] = exc if isinstance(exc, CfcError) else \
                        DimensionMismatch(f"undecodable payload: {exc}")
            out.release = self._release(tables, self._rng.child(f"run/{self._runs - 1}"), out.failures)
            return out

        for staged, payload, resp in opened:
            cid = staged.blob_id.hex()
            try:
                result = self._select(ClientTable.from_dict(canonical.loads(payload)))
            except (CfcError, ValueError) as exc:
                out.failures[cid] = exc if isinstance(exc, CfcError) else FunctionMisbehavior(str(exc))
                continue
            req = WrapRequest(canonical.dumpb(result), staged.blob.header.policy_digest,
                              resp.ledger_public_key, resp.key_id)
            blob = encrypt_blob(req, stage=resp.dst_node, blob_id=self._ids.generator.bytes(16)
                                if self._rng.test_mode else None)
            out.blobs.append(StagedBlob(blob, resp.dst_node))
        return out


def project(t: ClientTable, key_columns: Sequence[str], value_columns: Sequence[str]) -> ClientTable:
    try:
        ki = [t.key_columns.index(c) for c in key_columns]
        vi = [t.value_columns.index(c) for c in value_columns]
    except ValueError as exc:
        raise FunctionMisbehavior(f"input lacks a selected column: {exc}") from exc
    rows = tuple((tuple(k[i] for i in ki), tuple(v[i] for i in vi)) for k, v in t.rows)
    return ClientTable(tuple(key_columns), tuple(value_columns), rows)


def spawn_transform(spec: TransformSpec, platform: Platform, ledger_rv: ReferenceValues, **kw) -> TrustedTransform:
    return TrustedTransform(spec, platform, ledger_rv, **kw)


def process_stage(inst: TrustedTransform, blobs: Sequence[StagedBlob], ledger: Ledger, policy: AccessPolicy,
                  relay: Callable[[AuthorizeRequest], RewrappedKey] | None = None) -> StageOutput:
    """Run one transform over ``blobs``.

    Per-blob ledger errors are collected in ``failures``; the remaining
    blobs are still processed (and a terminal release covers only them).
    """
    return inst.process(blobs, ledger, policy, relay)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Stage:
    src_node: int
    spec: TransformSpec


@dataclass
class PipelineRun:
    policy: AccessPolicy
    stages: tuple[Stage, ...]
    inputs: tuple[EncryptedBlob, ...] = ()
    outputs: list[StageOutput] = field(default_factory=list)


@dataclass
class OrchestrationResult:
    releases: list[Release] = field(default_factory=list)
    stage_outputs: list[StageOutput] = field(default_factory=list)
    data_loss: int = 0
    crashes: int = 0


class TransformFactory:
    """Starts transform instances on one platform (the orchestrator's job)."""

    def __init__(self, platform: Platform, ledger_rv: ReferenceValues, *,
                 endorsements: Mapping[str, Sequence[Endorsement]] | None = None,
                 ledger_endorsements: Sequence[Endorsement] = (), rng: Randomness | None = None):
        self.platform = platform
        self.ledger_rv = ledger_rv
        self.endorsements = dict(endorsements or {})
        self.ledger_endorsements = tuple(ledger_endorsements)
        self.rng = rng
        self._spawned = 0
        self._lock = threading.Lock()

    def __call__(self, spec: TransformSpec) -> TrustedTransform:
        with self._lock:
            n = self._spawned
            self._spawned += 1
        rng = None if self.rng is None else self.rng.child(f"transform/{n}")
        return TrustedTransform(spec, self.platform, self.ledger_rv,
                                endorsements=self.endorsements.get(spec.behavior, ()),
                                ledger_endorsements=self.ledger_endorsements, rng=rng)


def check_plan(policy: AccessPolicy, stages: Sequence[Stage]) -> None:
    order = {n: i for i, n in enumerate(topological_nodes(policy))}
    last = -1
    for s in stages:
        if s.src_node not in order:
            raise ValueError(f"stage reads unknown node {s.src_node}")
        if order[s.src_node] < last:
            raise ValueError("stage order is not a topological order of the policy graph")
        last = order[s.src_node]


def orchestrate(run: PipelineRun, ledger: Ledger, spawn: Callable[[TransformSpec], TrustedTransform], *,
                retries: int = 0, strict: bool = True) -> OrchestrationResult:
    """Execute ``run.stages`` in order and collect terminal releases.

    A stage whose transform crashes is retried on a fresh instance up to
    ``retries`` times; the ledger still enforces usage limits, so blobs it
    already authorized for the crashed attempt come back BudgetExhausted and
    are counted as data loss.  With ``strict`` a stage with any per-blob
    failure raises :class:`StageFailed` carrying the partial result.
    """
    check_plan(run.policy, run.stages)
    pools: dict[int, list[StagedBlob]] = {0: [StagedBlob(b, 0) for b in run.inputs]}
    result = OrchestrationResult()
    for i, stage in enumerate(run.stages):
        blobs = pools.get(stage.src_node, [])
        crashed = False
        for attempt in range(retries + 1):
            try:
                out = spawn(stage.spec).process(blobs, ledger, run.policy)
                break
            except TransformCrashed as exc:
                crashed = True
                result.crashes += 1
                last_exc = exc
        else:
            raise StageFailed(i, {"*": last_exc})
        if crashed:
            result.data_loss += sum(isinstance(e, BudgetExhausted) for e in out.failures.values())
        run.outputs.append(out)
        result.stage_outputs.append(out)
        for sb in out.blobs:
            pools.setdefault(sb.node, []).append(sb)
        if out.release is not None:
            result.releases.append(out.release)
        if out.failures and strict:
            exc = StageFailed(i, dict(out.failures))
            exc.result = result
            raise exc
    return result
