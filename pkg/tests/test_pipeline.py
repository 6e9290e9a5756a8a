from dataclasses import replace

import pytest

from cfc import canonical
from cfc.aggcore import ClientTable, derive_noise_plan
from cfc.attestation import verify_evidence
from cfc.dpquery import compile_query
from cfc.envelope import decrypt_blob, unwrap_data_key
from cfc.errors import (
    AuthFailure,
    BadEvidence,
    BudgetExhausted,
    FunctionMisbehavior,
    NonceReplayDetected,
    ReleaseForbidden,
    StageFailed,
    UnknownKey,
)
from cfc.pipeline import (
    PER_USER_FUNCTIONS,
    PHH,
    PipelineRun,
    Stage,
    StagedBlob,
    TransformSpec,
    application_digest,
    check_plan,
    orchestrate,
    register_per_user_function,
    run_per_user_function,
)
from cfc.policy import AccessPolicy, PolicyEdge
from cfc.scenarios import World, WorldConfig, phh_policy

from conftest import SUMMARIZATION, sample_table, select_spec, staged, uploaded

QUERY = compile_query(
    "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS (epsilon=1, delta=1e-8, max_groups_contributed=2) "
    "color, food, SUM(weekdays) @{L_inf = 1} AS wd FROM t GROUP BY color, food")
PHH_SPEC = TransformSpec.phh(QUERY)
STAGES = (Stage(0, select_spec()), Stage(1, PHH_SPEC))


# --- per-user functions that try to carry state between users -------------

_COUNTER = 0


@register_per_user_function("test.global_counter")
def _global_counter(record, _state):
    global _COUNTER
    seen = _COUNTER
    _COUNTER += 1
    record["rows"][0]["values"][0] = float(seen)
    return record


def _attr_counter(record, _state):
    seen = _attr_counter.calls
    _attr_counter.calls += 1
    record["rows"][0]["values"][0] = float(seen)
    return record


_attr_counter.calls = 0


def _closure_counter():
    box = [0]

    def fn(record, _state):
        seen = box[0]
        box[0] += 1
        record["rows"][0]["values"][0] = float(seen)
        return record
    return fn


def _mutates_public_state(record, state):
    seen = len(state)
    state.append(1)
    record["rows"][0]["values"][0] = float(seen)
    return record


register_per_user_function("test.two_records")(lambda r, s: [r, r])
register_per_user_function("test.raises")(lambda r, s: 1 / 0)
register_per_user_function("test.bad_shape")(lambda r, s: {"rows": "nope"})


def record():
    return sample_table().to_dict()


@pytest.mark.parametrize("fn", [_global_counter, _attr_counter, _closure_counter()])
def test_state_never_survives_between_users(fn):
    for _ in range(5):
        assert run_per_user_function(fn, record())["rows"][0]["values"][0] == 0.0
    assert _COUNTER == 0 and _attr_counter.calls == 0


def test_public_state_mutation_is_discarded():
    state = []
    for _ in range(3):
        assert run_per_user_function(_mutates_public_state, record(), state)["rows"][0]["values"][0] == 0.0
    assert state == []


def test_identity_function():
    assert run_per_user_function(PER_USER_FUNCTIONS["identity"], record()) == record()


@pytest.mark.parametrize("name,message", [("test.two_records", "exactly one record, emitted 2"),
                                          ("test.raises", "ZeroDivisionError")])
def test_misbehaving_functions(name, message):
    with pytest.raises(FunctionMisbehavior, match=message):
        run_per_user_function(PER_USER_FUNCTIONS[name], record())


@pytest.mark.parametrize("name", ["test.two_records", "test.raises", "test.bad_shape", "not.registered"])
def test_misbehaving_function_fails_only_that_blob(world, name):
    policy, _, _, blobs = uploaded(world, 2)
    spec = TransformSpec.select(("color", "food"), ("weekdays", "weekends"), per_user_function=name)
    out = world.factory(spec).process(staged(blobs), world.ledger, policy)
    assert out.blobs == []
    assert set(out.failures) == {b.blob_id.hex() for b in blobs}
    assert all(isinstance(e, FunctionMisbehavior) for e in out.failures.values())


def test_counter_function_in_pipeline_sees_fresh_state_per_user(world):
    policy, _, _, blobs = uploaded(world, 4)
    spec = TransformSpec.select(("color", "food"), ("weekdays", "weekends"), per_user_function="test.global_counter")
    out = world.factory(spec).process(staged(blobs), world.ledger, policy)
    assert len(out.blobs) == 4 and not out.failures
    rec = world.ledger._keys[world.bundle.key_id]
    for sb in out.blobs:
        dk = unwrap_data_key(sb.blob.header, rec.private_key, sb.blob.header.policy_digest, 1)
        table = ClientTable.from_dict(canonical.loads(decrypt_blob(sb.blob, dk)))
        assert table.rows[0][1][0] == 0.0


# --- transforms -----------------------------------------------------------

def test_spawned_instances_have_distinct_keys(world):
    a, b = world.factory(select_spec()), world.factory(select_spec())
    assert a.recipient_public_key != b.recipient_public_key
    for inst in (a, b):
        identity = verify_evidence(inst.evidence, world.transform_rv, inst.endorsements)
        assert identity.chain.application_digest == select_spec().application_digest
        assert identity.chain.config_digest == select_spec().config_digest
        assert identity.app_public_keys.encryption == inst.recipient_public_key


def test_config_changed_after_attestation_rejected(world):
    policy, _, _, blobs = uploaded(world, 1)
    inst = world.factory(select_spec())
    inst.spec = TransformSpec.select(("color",), ("weekdays",))
    out = inst.process(staged(blobs), world.ledger, policy)
    (err,) = out.failures.values()
    assert isinstance(err, BadEvidence)


def test_select_emits_opaque_intermediates(world):
    policy, _, _, blobs = uploaded(world, 3)
    out = world.factory(select_spec()).process(staged(blobs), world.ledger, policy)
    assert len(out.blobs) == 3 and out.edge_id == "select" and out.release is None
    rec = world.ledger._keys[world.bundle.key_id]
    for sb in out.blobs:
        h = sb.blob.header
        assert sb.node == 1
        assert h.policy_digest == blobs[0].header.policy_digest and h.ledger_key_id == world.bundle.key_id
        assert b"red" not in sb.blob.to_bytes()
        with pytest.raises(AuthFailure):
            unwrap_data_key(h, rec.private_key, h.policy_digest, 0)
    assert {sb.blob_id for sb in out.blobs}.isdisjoint(b.blob_id for b in blobs)


def test_replayed_response_detected(world):
    policy, _, _, (blob,) = uploaded(world, 1, policy=phh_policy(usage_limit=2))
    inst = world.factory(select_spec())
    sb = StagedBlob(blob)
    resp = world.ledger.authorize_access(inst.request_authorization(sb, policy))
    payload, _ = inst.open_authorization(sb, resp, world.ledger.evidence)
    assert ClientTable.from_dict(canonical.loads(payload)) == sample_table()
    with pytest.raises(NonceReplayDetected):
        inst.open_authorization(sb, resp, world.ledger.evidence)


def test_response_for_other_transform_refused(world):
    policy, _, _, (blob,) = uploaded(world, 1)
    a, b = world.factory(select_spec()), world.factory(select_spec())
    resp = world.ledger.authorize_access(a.request_authorization(StagedBlob(blob), policy))
    from cfc.errors import BadLedgerResponse
    with pytest.raises(BadLedgerResponse):
        b.open_authorization(StagedBlob(blob), resp, world.ledger.evidence)


def test_full_pipeline_noise_off_release():
    world = World(WorldConfig(seed=3, noise_off=True))
    policy, _, _, blobs = uploaded(world, 60)
    result = orchestrate(PipelineRun(policy, STAGES, tuple(blobs)), world.ledger, world.factory)
    (release,) = result.releases
    thr = derive_noise_plan(QUERY).columns[0].threshold
    assert 30 < thr < 60   # green/eggs (0.5 each) drops, red/apple (1.0 each) stays
    assert release.rows == {("red", "apple"): (60.0,)}
    assert release.output_names == ("wd",)
    for b in blobs:
        assert world.ledger.access_count(b.blob_id, "select") == 1
    assert world.ledger.stats()["authorizations"] == 120


def test_terminal_rerun_is_budget_exhausted(world):
    policy, _, _, blobs = uploaded(world, 3)
    inter = world.factory(select_spec()).process(staged(blobs), world.ledger, policy).blobs
    first = world.factory(PHH_SPEC).process(inter, world.ledger, policy)
    assert first.release is not None and not first.failures
    again = world.factory(PHH_SPEC).process(inter, world.ledger, policy)
    assert again.release is None
    assert len(again.failures) == 3 and all(isinstance(e, BudgetExhausted) for e in again.failures.values())


def test_empty_input_produces_no_release(world):
    result = orchestrate(PipelineRun(phh_policy(), STAGES, ()), world.ledger, world.factory)
    assert result.releases == [] and result.data_loss == 0


def test_crash_after_authorization_costs_data(world):
    policy, _, _, blobs = uploaded(world, 4)
    spawned = []

    def spawn(spec):
        inst = world.factory(spec)
        if spec.behavior == PHH and not any(s.spec.behavior == PHH for s in spawned):
            inst.fault = "crash_after_authorization"
        spawned.append(inst)
        return inst

    result = orchestrate(PipelineRun(policy, STAGES, tuple(blobs)), world.ledger, spawn, retries=1, strict=False)
    assert result.crashes == 1 and result.data_loss == 4
    assert result.releases == []


def test_crash_without_retries_fails_stage(world):
    policy, _, _, blobs = uploaded(world, 1)

    def spawn(spec):
        inst = world.factory(spec)
        inst.fault = "crash_after_authorization"
        return inst

    with pytest.raises(StageFailed):
        orchestrate(PipelineRun(policy, STAGES, tuple(blobs)), world.ledger, spawn)


def test_check_plan():
    check_plan(phh_policy(), STAGES)
    with pytest.raises(ValueError):
        check_plan(phh_policy(), STAGES[::-1])
    with pytest.raises(ValueError):
        check_plan(phh_policy(), (Stage(7, PHH_SPEC),))


def test_strict_mode_raises_with_partial_result(world):
    policy, _, _, blobs = uploaded(world, 2)
    foreign = World(WorldConfig(seed=4, noise_off=True))
    _, _, _, (alien,) = uploaded(foreign, 1)
    with pytest.raises(StageFailed) as info:
        orchestrate(PipelineRun(policy, STAGES, (*blobs, alien)), world.ledger, world.factory)
    (err,) = info.value.causes.values()
    assert info.value.stage == 0
    assert isinstance(err, UnknownKey)
    assert len(info.value.result.stage_outputs) == 1
    # the strict run spent the budget; a fresh world shows lenient mode carrying on
    fresh = World(WorldConfig(seed=5, noise_off=True))
    policy, _, _, blobs = uploaded(fresh, 2)
    lenient = orchestrate(PipelineRun(policy, STAGES, (*blobs, alien)), fresh.ledger, fresh.factory, strict=False)
    assert lenient.stage_outputs[0].authorized == 2 and len(lenient.stage_outputs[0].failures) == 1
    assert len(lenient.releases) == 1


def test_aggregation_binary_on_non_terminal_edge_cannot_release(world):
    phh = application_digest(PHH)
    policy = AccessPolicy(nodes=(0, 1, 2), edges=(
        PolicyEdge("pre", 0, 1, phh, {}, 1),
        PolicyEdge("out", 1, 2, phh, {"epsilon_max": 1, "delta_max": 1e-8}, 1, True),
    ))
    _, _, _, blobs = uploaded(world, 1, policy=policy)
    with pytest.raises(ReleaseForbidden):
        world.factory(PHH_SPEC).process(staged(blobs), world.ledger, policy)


def test_task_summarization_matches_select_spec():
    assert select_spec().config["key_columns"] == list(SUMMARIZATION.key_columns)
    assert replace(select_spec()).terminal is False and PHH_SPEC.terminal is True
