"""End-to-end scenarios and the adversary harness.

A :class:`World` wires one simulated deployment together: a platform with a
hardware root, a publisher that endorses binaries and policies into a
transparency log, a ledger with one wrapping key, and the reference values
clients and transforms use.  Each scenario function runs against a fresh
world and returns a :class:`ScenarioReport` of named checks.

Reports never contain key material or random identifiers, so a fixed seed
gives a byte-identical report.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import aggcore, canonical
from .aggcore import ClientTable, Randomness, ReleasedHistogram
from .attestation import (
    LAYERS,
    AttestationEvidence,
    Endorsement,
    InclusionRef,
    Platform,
    ReferenceValues,
    SubjectKind,
    endorse,
    generate_evidence,
    raw_public,
)
from .client import (
    DeviceState,
    Summarization,
    TaskAssignment,
    verify_and_upload,
)
from .clock import DAY, HOUR, ManualClock, SkewedClock
from .dpquery import ONES_COLUMN, DpQueryConfig, compile_query
from .envelope import EncryptedBlob, decrypt_blob, unwrap_data_key
from .errors import CfcError, UploadRefused
from .ledger import AuthorizeRequest, Ledger, RewrappedKey
from .pipeline import (
    DP_VECTOR_SUM,
    PHH,
    SELECT,
    OrchestrationResult,
    PipelineRun,
    ReleasedVector,
    Stage,
    StagedBlob,
    TransformFactory,
    TransformSpec,
    application_digest,
    orchestrate,
)
from .policy import AccessPolicy, PolicyEdge, canonical_digest
from .transparency import TransparencyLog

START_MS = 1_700_000_000_000
DEFAULT_TTL_MS = 7 * DAY


def sample_query_text() -> str:
    return resources.files("cfc").joinpath("data/sample_query.dpsql").read_text()


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def phh_policy(epsilon_max: float = 1.0, delta_max: float = 1e-8, usage_limit: int = 1,
               name: str = "phh") -> AccessPolicy:
    """upload --SELECT--> selected --PHH (terminal)--> released."""
    return AccessPolicy(
        nodes=(0, 1, 2),
        edges=(
            PolicyEdge("select", 0, 1, application_digest(SELECT), {}, usage_limit),
            PolicyEdge("phh", 1, 2, application_digest(PHH),
                       {"epsilon_max": epsilon_max, "delta_max": delta_max}, usage_limit, terminal=True),
        ),
        name=name,
    )


def sample_policy() -> AccessPolicy:
    """SELECT then a DP sum with epsilon <= 1 and delta <= 1e-15, each once."""
    return phh_policy(1.0, 1e-15, 1, name="select-then-dp-sum")


def direct_phh_policy(epsilon_max: float, delta_max: float, usage_limit: int = 1) -> AccessPolicy:
    return AccessPolicy(
        nodes=(0, 1),
        edges=(PolicyEdge("phh", 0, 1, application_digest(PHH),
                          {"epsilon_max": epsilon_max, "delta_max": delta_max}, usage_limit, terminal=True),),
        name="phh-direct",
    )


def fl_policy(epsilon_max: float = 1.0, delta_max: float = 1e-6, usage_limit: int = 1) -> AccessPolicy:
    return AccessPolicy(
        nodes=(0, 1),
        edges=(PolicyEdge("dp_sum", 0, 1, application_digest(DP_VECTOR_SUM),
                          {"epsilon_max": epsilon_max, "delta_max": delta_max}, usage_limit, terminal=True),),
        name="fl-round",
    )


# ---------------------------------------------------------------------------
# World
# ---------------------------------------------------------------------------

@dataclass
class WorldConfig:
    seed: int | None = None
    noise_off: bool = False
    ttl_ms: int = DEFAULT_TTL_MS
    ledger_skew_ms: int = 0
    require_inclusion: bool = True


class World:
    def __init__(self, cfg: WorldConfig | None = None):
        self.cfg = cfg = cfg or WorldConfig()
        self.rng = Randomness(cfg.seed, noise_off=cfg.noise_off) if cfg.seed is not None \
            else Randomness.production()
        self.clock = ManualClock(START_MS)
        self.ledger_clock = SkewedClock(self.clock, cfg.ledger_skew_ms)
        self.platform = Platform(Ed25519PrivateKey.generate())
        self.publisher = Ed25519PrivateKey.generate()
        self.log = TransparencyLog()

        self.binary_endorsements = {b: (self.endorse_and_log(application_digest(b), SubjectKind.BINARY),)
                                    for b in (SELECT, PHH, DP_VECTOR_SUM)}
        self.transform_rv = ReferenceValues.build(
            hardware_roots=[self.platform.root_public_key],
            allowed=self._platform_allowlist(),
            endorsers=[raw_public(self.publisher)],
            log_keys=[self.log.public_key],
            require_inclusion_proofs=cfg.require_inclusion,
            checked_layers=("firmware", "kernel", "application"),
        )
        self.ledger = Ledger(self.platform, self.transform_rv, clock=self.ledger_clock)
        self.ledger_endorsements = (self.endorse_and_log(
            self.ledger.evidence.chain.application_digest, SubjectKind.BINARY),)
        self.client_rv = ReferenceValues.build(
            hardware_roots=[self.platform.root_public_key],
            allowed={**self._platform_allowlist(), "config": [self.ledger.config_digest]},
            endorsers=[raw_public(self.publisher)],
            log_keys=[self.log.public_key],
            require_inclusion_proofs=cfg.require_inclusion,
            checked_layers=LAYERS,
        )
        self.factory = TransformFactory(
            self.platform, self.client_rv, endorsements=self.binary_endorsements,
            ledger_endorsements=self.ledger_endorsements,
            rng=self.rng.child("transforms") if self.rng.test_mode else None)
        self.bundle = self.ledger.create_key(cfg.ttl_ms)

    @property
    def publisher_key_id(self) -> bytes:
        return canonical.key_id(raw_public(self.publisher))

    def _platform_allowlist(self) -> dict[str, list[bytes]]:
        chain = self.platform.measure(b"", b"")
        return {"firmware": [chain.firmware_digest], "kernel": [chain.kernel_digest]}

    def endorse_and_log(self, digest: bytes, kind: SubjectKind, signer: Ed25519PrivateKey | None = None,
                        log: bool = True) -> Endorsement:
        e = endorse(digest, kind, signer or self.publisher)
        if not log:
            return e
        index, head = self.log.append(e)
        return e.with_inclusion(InclusionRef(self.log.prove_inclusion(index), head))

    def task(self, policy: AccessPolicy, summarization: Summarization, *, task_id: str = "task",
             policy_endorsement: Endorsement | None = None, swor_period: int | str | None = DAY,
             ledger_evidence: AttestationEvidence | None = None) -> TaskAssignment:
        if policy_endorsement is None:
            policy_endorsement = self.endorse_and_log(canonical_digest(policy), SubjectKind.POLICY)
        return TaskAssignment(
            task_id=task_id,
            summarization=summarization,
            swor_period=swor_period,
            policy=policy,
            policy_endorsement=policy_endorsement,
            ledger_bundle=self.ledger.public_bundle(self.bundle.key_id),
            ledger_evidence=ledger_evidence or self.ledger.evidence,
            ledger_endorsements=self.ledger_endorsements,
        )

    def device(self, device_id: str, store: ClientTable) -> DeviceState:
        if self.rng.test_mode:
            gen = self.rng.child(f"device/{device_id}/ids").generator
            return DeviceState(device_id, store, clock=self.clock, rng=lambda n: gen.bytes(n))
        return DeviceState(device_id, store, clock=self.clock)

    def upload_all(self, devices: Sequence[DeviceState], task: TaskAssignment,
                   workers: int = 8) -> list[EncryptedBlob | UploadRefused]:
        """Every device verifies and uploads concurrently; results in device order."""
        def one(d: DeviceState):
            try:
                return verify_and_upload(d, task, self.client_rv)
            except UploadRefused as exc:
                return exc
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, devices))

    def direct_decryption_attempts(self, blobs: Iterable[EncryptedBlob], max_stage: int = 3) -> int:
        """Try to open ``blobs`` with every private key the ledger now holds.

        Reaches into ledger internals on purpose: this is the adversary with
        full memory access after erasure.  Returns the count of successes.
        """
        recovered = 0
        keys = [r.private_key for r in self.ledger._keys.values() if r.private_key is not None]
        for blob in blobs:
            for priv in keys:
                for stage in range(max_stage):
                    try:
                        dk = unwrap_data_key(blob.header, priv, blob.header.policy_digest, stage)
                        decrypt_blob(blob, dk)
                        recovered += 1
                    except CfcError:
                        pass
        return recovered


# ---------------------------------------------------------------------------
# Data generators and oracles
# ---------------------------------------------------------------------------

COLORS = ("red", "green", "white", "blue", "yellow")
FOODS = ("apple", "eggs", "grape", "kiwi", "pear")


def phh_device_table(gen: np.random.Generator, cfg: DpQueryConfig) -> ClientTable:
    """Rows for one device with at most ``max_groups_contributed`` distinct keys."""
    all_keys = [(c, f) for c in COLORS for f in FOODS]
    n = int(gen.integers(1, min(cfg.max_groups_contributed, len(all_keys)) + 1))
    keys = [("red", "apple")] if gen.random() < 0.9 else []
    for i in gen.permutation(len(all_keys)):
        if len(keys) >= n:
            break
        if all_keys[i] not in keys:
            keys.append(all_keys[i])
    value_columns = [c for c in cfg.value_columns if c != ONES_COLUMN] + ["price"]
    rows = []
    for k in keys[:n]:
        for _ in range(int(gen.integers(1, 3))):
            vals = [float(gen.integers(1, 4)) if j % 2 == 0 else float(gen.integers(2, 10)) / 2
                    for j in range(len(value_columns) - 1)]
            rows.append((k, vals + [round(float(gen.uniform(0.5, 5.0)), 2)]))
    return ClientTable.of(tuple(cfg.key_columns), value_columns, rows)


def oracle_phh(tables: Sequence[ClientTable], cfg: DpQueryConfig,
               thresholds: Sequence[float]) -> dict[tuple, tuple]:
    """Plain-loop clip-and-sum release for tables with at most l0 distinct keys."""
    total: dict[tuple, list[float]] = {}
    for t in tables:
        local: dict[tuple, list[float]] = {}
        for key, vals in t.rows:
            row = {c: v for c, v in zip(t.value_columns, vals)}
            row[ONES_COLUMN] = 1.0
            k = tuple(key[t.key_columns.index(c)] for c in cfg.key_columns)
            acc = local.setdefault(k, [0.0] * len(cfg.aggregations))
            for j, a in enumerate(cfg.aggregations):
                acc[j] += row[a.input_column]
        assert len(local) <= cfg.max_groups_contributed
        keys = sorted(local)
        for j, a in enumerate(cfg.aggregations):
            col = [min(a.l_inf, max(-a.l_inf, local[k][j])) for k in keys]
            if a.l_1 is not None and sum(abs(v) for v in col) > a.l_1:
                s = a.l_1 / sum(abs(v) for v in col)
                col = [v * s for v in col]
            if a.l_2 is not None and math.sqrt(sum(v * v for v in col)) > a.l_2:
                s = a.l_2 / math.sqrt(sum(v * v for v in col))
                col = [v * s for v in col]
            for k, v in zip(keys, col):
                local[k][j] = v
        for k in keys:
            acc = total.setdefault(k, [0.0] * len(cfg.aggregations))
            for j in range(len(acc)):
                acc[j] += local[k][j]
    return {k: tuple(v) for k, v in total.items() if all(abs(x) >= t for x, t in zip(v, thresholds))}


def histograms_close(a: dict, b: dict, rel: float = 1e-9) -> bool:
    return set(a) == set(b) and all(
        math.isclose(x, y, rel_tol=rel, abs_tol=1e-12) for k in a for x, y in zip(a[k], b[k]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    ok: bool
    detail: Any = None

    def to_dict(self) -> dict:
        return {"kind": "check", "name": self.name, "ok": self.ok, "detail": self.detail}


@dataclass
class ScenarioReport:
    scenario: str
    params: dict = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    releases: list[dict] = field(default_factory=list)
    ledger_stats: dict = field(default_factory=dict)
    world: World | None = field(default=None, repr=False)
    devices: list[DeviceState] = field(default_factory=list, repr=False)

    def check(self, name: str, ok: bool, detail: Any = None) -> bool:
        self.checks.append(Check(name, bool(ok), detail))
        return bool(ok)

    @property
    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.ok]

    @property
    def exit_code(self) -> int:
        return 0 if self.checks and not self.failed else 1

    def lines(self) -> list[str]:
        out = [canonical.dumps({"kind": "scenario", "name": self.scenario, **self.params})]
        out += [canonical.dumps(c.to_dict()) for c in self.checks]
        out += [canonical.dumps({"kind": "release", **r}) for r in self.releases]
        out.append(canonical.dumps({"kind": "ledger_stats", **self.ledger_stats}))
        out.append(canonical.dumps({"kind": "summary", "exit_code": self.exit_code, "failed": self.failed}))
        return out

    def summary(self) -> str:
        parts = [f"{self.scenario}: {'OK' if self.exit_code == 0 else 'FAILED'}"]
        parts += [f"  [{'pass' if c.ok else 'FAIL'}] {c.name}" for c in self.checks]
        return "\n".join(parts)


def release_dict(r) -> dict:
    if isinstance(r, ReleasedHistogram):
        return {"type": "histogram", **r.to_dict()}
    if isinstance(r, ReleasedVector):
        return {"type": "vector", **r.to_dict()}
    raise TypeError(type(r))


def _causes(failures: dict) -> dict[str, int]:
    out: dict[str, int] = {}
    for e in failures.values():
        out[e.cause] = out.get(e.cause, 0) + 1
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    scenario: str
    devices: int | None = None
    query_text: str | None = None
    policy: AccessPolicy | None = None
    seed: int | None = None
    noise_off: bool = False
    skew_ms: int | None = None
    ttl_ms: int = DEFAULT_TTL_MS


def _query(cfg: ScenarioConfig) -> DpQueryConfig:
    return compile_query(cfg.query_text or sample_query_text())


def _world(cfg: ScenarioConfig, **kw) -> World:
    return World(WorldConfig(seed=cfg.seed, noise_off=cfg.noise_off, ttl_ms=cfg.ttl_ms, **kw))


def _phh_setup(cfg: ScenarioConfig, n_default: int, world: World | None = None):
    q = _query(cfg)
    world = world or _world(cfg)
    policy = cfg.policy or phh_policy()
    value_cols = tuple(c for c in q.value_columns if c != ONES_COLUMN)
    task = world.task(policy, Summarization(tuple(q.key_columns), value_cols))
    n = cfg.devices or n_default
    devices = [world.device(f"device-{i:04d}", phh_device_table(world.rng.child(f"data/{i}").generator, q))
               for i in range(n)]
    return q, world, policy, task, devices


def _phh_stages(q: DpQueryConfig) -> tuple[Stage, ...]:
    value_cols = tuple(c for c in q.value_columns if c != ONES_COLUMN)
    return (Stage(0, TransformSpec.select(q.key_columns, value_cols)), Stage(1, TransformSpec.phh(q)))


def _blobs(results) -> list[EncryptedBlob]:
    return [r for r in results if isinstance(r, EncryptedBlob)]


def scenario_phh(cfg: ScenarioConfig) -> ScenarioReport:
    q, world, policy, task, devices = _phh_setup(cfg, 200)
    rep = ScenarioReport("phh", world=world, devices=devices)
    results = world.upload_all(devices, task)
    blobs = _blobs(results)
    rep.check("uploads_accepted", len(blobs) == len(devices), {"accepted": len(blobs), "devices": len(devices)})
    result = orchestrate(PipelineRun(policy, _phh_stages(q), tuple(blobs)), world.ledger, world.factory,
                         strict=False)
    failures = {k: v for out in result.stage_outputs for k, v in out.failures.items()}
    rep.check("pipeline_without_denials", not failures, _causes(failures))
    rep.check("one_release", len(result.releases) == 1, len(result.releases))
    rep.check("authorizations_once_per_blob_per_edge",
              world.ledger.stats()["authorizations"] == 2 * len(blobs), world.ledger.stats()["authorizations"])
    if result.releases:
        release = result.releases[0]
        rep.releases.append(release_dict(release))
        if cfg.noise_off:
            plan = aggcore.derive_noise_plan(q)
            tables = [d.store for d in devices]
            oracle = oracle_phh(tables, q, [c.threshold for c in plan.columns])
            rep.check("release_matches_oracle", histograms_close(release.rows, oracle),
                      {"released_keys": len(release.rows), "oracle_keys": len(oracle)})
    rep.ledger_stats = world.ledger.stats()
    return rep


def scenario_fl_round(cfg: ScenarioConfig, dimension: int = 8, l2_clip: float = 1.0,
                      epsilon: float = 0.5, delta: float = 1e-6) -> ScenarioReport:
    world = _world(cfg)
    policy = cfg.policy or fl_policy()
    cols = tuple(f"g{i}" for i in range(dimension))
    task = world.task(policy, Summarization((), cols))
    n = cfg.devices or 32
    devices, vectors = [], []
    for i in range(n):
        g = world.rng.child(f"grad/{i}").generator.normal(0.0, 1.0, dimension) * (0.5 + i % 3)
        vectors.append(g)
        devices.append(world.device(f"device-{i:04d}", ClientTable.of((), cols, [((), g.tolist())])))
    rep = ScenarioReport("fl_round", world=world, devices=devices)
    blobs = _blobs(world.upload_all(devices, task))
    rep.check("uploads_accepted", len(blobs) == n, len(blobs))
    spec = TransformSpec.dp_vector_sum(l2_clip, epsilon, delta, dimension)
    result = orchestrate(PipelineRun(policy, (Stage(0, spec),), tuple(blobs)), world.ledger, world.factory,
                         strict=False)
    rep.check("one_release", len(result.releases) == 1, len(result.releases))
    if result.releases:
        rel = result.releases[0]
        rep.releases.append(release_dict(rel))
        if cfg.noise_off:
            oracle = np.zeros(dimension)
            for v in vectors:
                norm = math.sqrt(sum(x * x for x in v))
                oracle += v * (l2_clip / norm) if norm > l2_clip else v
            err = float(np.max(np.abs(np.array(rel.values) - oracle)) / max(1e-300, float(np.max(np.abs(oracle)))))
            rep.check("release_matches_oracle", err <= 1e-9, {"max_relative_error": err})
    rep.ledger_stats = world.ledger.stats()
    return rep


def scenario_attack_replay(cfg: ScenarioConfig) -> ScenarioReport:
    q, world, policy, task, devices = _phh_setup(cfg, 4)
    rep = ScenarioReport("attack-replay", world=world, devices=devices)
    staged = [StagedBlob(b) for b in _blobs(world.upload_all(devices, task))]
    captured: list[tuple[AuthorizeRequest, RewrappedKey]] = []

    def relay(req):
        resp = world.ledger.authorize_access(req)
        captured.append((req, resp))
        return resp

    inst = world.factory(_phh_stages(q)[0].spec)
    out = inst.process(staged, world.ledger, policy, relay=relay)
    rep.check("honest_stage_succeeds", not out.failures and len(out.blobs) == len(staged), _causes(out.failures))
    by_id = {s.blob_id: s for s in staged}
    transform_blocked = ledger_blocked = 0
    for req, resp in captured:
        try:
            inst.open_authorization(by_id[resp.blob_id], resp, world.ledger.evidence)
        except CfcError as exc:
            transform_blocked += exc.cause == "NonceReplayDetected"
        try:
            world.ledger.authorize_access(req)
        except CfcError as exc:
            ledger_blocked += exc.cause in ("BudgetExhausted", "NonceReplay")
    rep.check("transform_rejects_replayed_response", transform_blocked == len(captured),
              {"replayed": len(captured), "rejected": transform_blocked})
    rep.check("ledger_rejects_replayed_request", ledger_blocked == len(captured),
              {"replayed": len(captured), "rejected": ledger_blocked})
    rep.ledger_stats = world.ledger.stats()
    return rep


def run_triangulation(world: World, policy: AccessPolicy, q: DpQueryConfig,
                      blobs: Sequence[EncryptedBlob]) -> tuple[OrchestrationResult, OrchestrationResult,
                                                                OrchestrationResult]:
    """Honest run, full re-run, and a re-run of only the terminal stage."""
    stages = _phh_stages(q)
    first = orchestrate(PipelineRun(policy, stages, tuple(blobs)), world.ledger, world.factory, strict=False)
    second = orchestrate(PipelineRun(policy, stages, tuple(blobs)), world.ledger, world.factory, strict=False)
    derived = first.stage_outputs[0].blobs if first.stage_outputs else []
    inst = world.factory(stages[1].spec)
    out = inst.process(derived, world.ledger, policy)
    third = OrchestrationResult(releases=[out.release] if out.release else [], stage_outputs=[out])
    return first, second, third


def scenario_attack_triangulate(cfg: ScenarioConfig) -> ScenarioReport:
    q, world, policy, task, devices = _phh_setup(cfg, 20)
    rep = ScenarioReport("attack-triangulate", world=world, devices=devices)
    blobs = _blobs(world.upload_all(devices, task))
    first, second, third = run_triangulation(world, policy, q, blobs)
    rep.check("first_run_releases", len(first.releases) == 1, len(first.releases))
    fails = second.stage_outputs[0].failures if second.stage_outputs else {}
    rep.check("rerun_zero_releases", not second.releases, len(second.releases))
    rep.check("rerun_budget_exhausted_per_blob",
              len(fails) == len(blobs) and all(e.cause == "BudgetExhausted" for e in fails.values()),
              _causes(fails))
    tfails = third.stage_outputs[0].failures
    rep.check("terminal_rerun_denied", not third.releases and all(e.cause == "BudgetExhausted"
                                                                  for e in tfails.values()) and tfails,
              _causes(tfails))
    derived = first.stage_outputs[0].blobs
    counts_ok = all(world.ledger.access_count(b.blob_id, "select") == 1 for b in blobs) and \
        all(world.ledger.access_count(s.blob_id, "phh") == 1 for s in derived)
    rep.check("exactly_one_success_per_blob_per_edge", counts_ok)
    if first.releases:
        rep.releases.append(release_dict(first.releases[0]))
    rep.ledger_stats = world.ledger.stats()
    return rep


def scenario_attack_rollback(cfg: ScenarioConfig) -> ScenarioReport:
    q, world, policy, task, devices = _phh_setup(cfg, 8)
    rep = ScenarioReport("attack-rollback", world=world, devices=devices)
    blobs = _blobs(world.upload_all(devices, task))
    stages = _phh_stages(q)
    out = world.factory(stages[0].spec).process([StagedBlob(b) for b in blobs], world.ledger, policy)
    derived = out.blobs
    rep.check("select_stage_ran", len(derived) == len(blobs), len(derived))
    world.ledger.restart()
    world.ledger.create_key(cfg.ttl_ms)  # attacker-friendly: a fresh key exists after restart
    retry = world.factory(stages[1].spec).process(derived, world.ledger, policy)
    rep.check("post_restart_authorizations_denied",
              retry.release is None and len(retry.failures) == len(derived)
              and all(e.cause == "UnknownKey" for e in retry.failures.values()), _causes(retry.failures))
    again = world.factory(stages[0].spec).process([StagedBlob(b) for b in blobs], world.ledger, policy)
    rep.check("original_blobs_unreadable", not again.blobs and all(e.cause == "UnknownKey"
                                                                   for e in again.failures.values()),
              _causes(again.failures))
    recovered = world.direct_decryption_attempts(blobs + [s.blob for s in derived])
    rep.check("zero_plaintext_recovered", recovered == 0, {"recovered": recovered})
    stats = world.ledger.stats()
    rep.check("erasure_flagged", stats["restarts"] == 1 and stats["erasures"] >= 1,
              {"restarts": stats["restarts"], "erasures": stats["erasures"]})
    rep.ledger_stats = stats
    return rep


def adversarial_table(gen: np.random.Generator, key_columns: Sequence[str], value_columns: Sequence[str],
                      honest_keys: Sequence[tuple]) -> ClientTable:
    """Arbitrary table: many keys (often the honest ones) and extreme values."""
    rows = []
    for _ in range(int(gen.integers(1, 30))):
        if honest_keys and gen.random() < 0.5:
            key = honest_keys[int(gen.integers(len(honest_keys)))]
        else:
            key = tuple(f"adv{int(gen.integers(50))}" for _ in key_columns)
        scale = float(10.0 ** gen.integers(-2, 7))
        rows.append((key, [float(gen.choice([-1, 1])) * scale * float(gen.random()) for _ in value_columns]))
    return ClientTable.of(key_columns, value_columns, rows)


def honest_influence(honest: tuple[str, ClientTable], adversaries: Sequence[tuple[str, ClientTable]],
                     q: DpQueryConfig, rng: Randomness) -> list[float]:
    """Per-column L1 change of the pre-noise aggregate when the honest client is removed."""
    bounded = {cid: aggcore.bound_contributions(
        aggcore.build_local_histogram(aggcore.project_for_query(t, q)), q, rng.child(cid))
        for cid, t in [honest, *adversaries]}
    with_h = aggcore.aggregate(bounded.items())
    without = aggcore.aggregate((c, h) for c, h in bounded.items() if c != honest[0])
    zero = (0.0,) * len(q.aggregations)
    return [sum(abs(with_h.get(k, zero)[j] - without.get(k, zero)[j]) for k in set(with_h) | set(without))
            for j in range(len(q.aggregations))]


def scenario_attack_sybil(cfg: ScenarioConfig, cohorts: int = 10) -> ScenarioReport:
    q = _query(cfg)
    world = _world(cfg)
    n = cfg.devices or 64
    policy = cfg.policy or phh_policy()
    value_cols = tuple(c for c in q.value_columns if c != ONES_COLUMN)
    task = world.task(policy, Summarization(tuple(q.key_columns), value_cols))
    honest_table = phh_device_table(world.rng.child("honest").generator, q)
    honest_keys = sorted({k for k, _ in honest_table.rows})
    devices = [world.device("honest", honest_table)]
    for i in range(n - 1):
        gen = world.rng.child(f"sybil/{i}").generator
        devices.append(world.device(f"sybil-{i:04d}", adversarial_table(gen, q.key_columns, value_cols, honest_keys)))
    rep = ScenarioReport("attack-sybil", world=world, devices=devices)
    blobs = _blobs(world.upload_all(devices, task))
    result = orchestrate(PipelineRun(policy, _phh_stages(q), tuple(blobs)), world.ledger, world.factory,
                         strict=False)
    rep.check("pipeline_ran", len(result.releases) == 1, len(result.releases))
    plan = aggcore.derive_noise_plan(q)
    bounds = [c.sensitivity_l1 for c in plan.columns]
    worst = [0.0] * len(bounds)
    for c in range(cohorts):
        gen = world.rng.child(f"cohort/{c}").generator
        adv = [(f"sybil-{i:04d}", adversarial_table(gen, q.key_columns, value_cols, honest_keys))
               for i in range(n - 1)]
        infl = honest_influence(("honest", honest_table), adv, q, world.rng.child(f"bound/{c}"))
        worst = [max(w, x) for w, x in zip(worst, infl)]
    rep.check("honest_influence_bounded", all(w <= b for w, b in zip(worst, bounds)),
              {"worst_l1": worst, "delta1": bounds, "adversaries": n - 1, "cohorts": cohorts})
    if result.releases:
        rep.releases.append(release_dict(result.releases[0]))
    rep.ledger_stats = world.ledger.stats()
    return rep


def scenario_attack_binary_tamper(cfg: ScenarioConfig) -> ScenarioReport:
    q, world, policy, task, devices = _phh_setup(cfg, 4)
    rep = ScenarioReport("attack-binary-tamper", world=world, devices=devices)
    blobs = _blobs(world.upload_all(devices, task))
    select = _phh_stages(q)[0].spec
    evil = TransformSpec(SELECT + "+exfiltrate", dict(select.config))
    inst = world.factory(evil)
    out = inst.process([StagedBlob(b) for b in blobs], world.ledger, policy)
    rep.check("ledger_refuses_tampered_transform",
              not out.blobs and len(out.failures) == len(blobs)
              and all(e.cause == "BadEvidence" for e in out.failures.values()), _causes(out.failures))
    # the operator boots a modified ledger binary on genuine hardware
    ev = world.ledger.evidence
    forged = generate_evidence(ev.chain.with_digest("application", application_digest("cfc.ledger/v1+keylogger")),
                               ev.app_public_keys, world.platform.hardware_root)
    bad_task = world.task(policy, task.summarization, task_id="task-tampered", ledger_evidence=forged)
    victim = world.device("victim", devices[0].store)
    try:
        verify_and_upload(victim, bad_task, world.client_rv)
        refused = None
    except UploadRefused as exc:
        refused = exc.check
    rep.check("client_refuses_tampered_ledger", refused == "ledger_evidence" and not victim.opstats,
              {"refused_by": refused})
    rep.check("refusal_recorded", victim.records and victim.records[-1].failed_check == "ledger_evidence")
    rep.ledger_stats = world.ledger.stats()
    return rep


def scenario_attack_policy_tamper(cfg: ScenarioConfig) -> ScenarioReport:
    q, world, policy, task, devices = _phh_setup(cfg, 4)
    rep = ScenarioReport("attack-policy-tamper", world=world, devices=devices)
    blobs = _blobs(world.upload_all(devices, task))
    lax = phh_policy(epsilon_max=100.0, delta_max=0.5, usage_limit=1000, name="lax")
    outcomes = {}
    rogue = Ed25519PrivateKey.generate()
    cases = {
        "unendorsed": world.task(lax, task.summarization, task_id="lax-1", policy_endorsement=task.policy_endorsement),
        "rogue_signer": world.task(lax, task.summarization, task_id="lax-2",
                                   policy_endorsement=endorse(canonical_digest(lax), SubjectKind.POLICY, rogue)),
        "not_logged": world.task(lax, task.summarization, task_id="lax-3",
                                 policy_endorsement=world.endorse_and_log(canonical_digest(lax), SubjectKind.POLICY,
                                                                          log=False)),
    }
    for name, t in cases.items():
        d = world.device(f"victim-{name}", devices[0].store)
        try:
            verify_and_upload(d, t, world.client_rv)
            outcomes[name] = None
        except UploadRefused as exc:
            outcomes[name] = exc.check
    expected = {"unendorsed": "policy_endorsement", "rogue_signer": "policy_endorsement",
                "not_logged": "policy_inclusion_proof" if world.cfg.require_inclusion else None}
    rep.check("clients_refuse_substituted_policy", outcomes == expected, outcomes)
    out = world.factory(_phh_stages(q)[0].spec).process([StagedBlob(b) for b in blobs], world.ledger, lax)
    rep.check("ledger_refuses_substituted_policy",
              not out.blobs and out.failures and all(e.cause == "PolicyDigestMismatch" for e in out.failures.values()),
              _causes(out.failures))
    rep.ledger_stats = world.ledger.stats()
    return rep


def scenario_attack_clock_skew(cfg: ScenarioConfig) -> ScenarioReport:
    tolerance = TaskAssignment.__dataclass_fields__["skew_tolerance_ms"].default
    skew = cfg.skew_ms if cfg.skew_ms is not None else 2 * tolerance
    rep = ScenarioReport("attack-clock-skew", params={"skew_ms": skew})
    ahead = _world(cfg, ledger_skew_ms=skew)
    _, _, _, task, devices = _phh_setup(cfg, 2, world=ahead)
    res = ahead.upload_all(devices, task)
    rep.check("ledger_ahead_refused", all(isinstance(r, UploadRefused) and r.check == "clock_skew" for r in res),
              [getattr(r, "check", "uploaded") for r in res])
    rep.check("no_opstats_on_refusal", all(not d.opstats for d in devices))
    behind = _world(cfg, ledger_skew_ms=-(cfg.ttl_ms + HOUR))
    _, _, _, task_b, devices_b = _phh_setup(cfg, 2, world=behind)
    res_b = behind.upload_all(devices_b, task_b)
    rep.check("ledger_behind_refused", all(isinstance(r, UploadRefused) and r.check == "clock_skew" for r in res_b),
              [getattr(r, "check", "uploaded") for r in res_b])
    honest = _world(cfg, ledger_skew_ms=tolerance // 2)
    _, _, _, task_h, devices_h = _phh_setup(cfg, 2, world=honest)
    res_h = honest.upload_all(devices_h, task_h)
    rep.check("small_skew_tolerated", all(isinstance(r, EncryptedBlob) for r in res_h),
              [getattr(r, "check", "uploaded") for r in res_h])
    led = honest.ledger
    before = led.stats()
    led.advance_time(honest.ledger_clock() + cfg.ttl_ms)
    led.advance_time(honest.ledger_clock())  # regression
    after = led.stats()
    rep.check("clock_regression_counted_not_undone",
              after["clock_regressions"] == before["clock_regressions"] + 1 and after["live_keys"] == 0,
              {"regressions": after["clock_regressions"], "live_keys": after["live_keys"]})
    rep.ledger_stats = after
    return rep


SCENARIOS: dict[str, Callable[[ScenarioConfig], ScenarioReport]] = {
    "phh": scenario_phh,
    "fl_round": scenario_fl_round,
    "attack-replay": scenario_attack_replay,
    "attack-triangulate": scenario_attack_triangulate,
    "attack-rollback": scenario_attack_rollback,
    "attack-sybil": scenario_attack_sybil,
    "attack-binary-tamper": scenario_attack_binary_tamper,
    "attack-policy-tamper": scenario_attack_policy_tamper,
    "attack-clock-skew": scenario_attack_clock_skew,
}


def run_scenario(cfg: ScenarioConfig) -> ScenarioReport:
    rep = SCENARIOS[cfg.scenario](cfg)
    rep.params = {"devices": len(rep.devices) if rep.devices else cfg.devices, "seed": cfg.seed,
                  "noise_off": cfg.noise_off, "ttl_ms": cfg.ttl_ms, **rep.params}
    return rep
