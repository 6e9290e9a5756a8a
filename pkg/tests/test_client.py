from dataclasses import replace

import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from cfc import canonical
from cfc.aggcore import ClientTable
from cfc.attestation import SubjectKind
from cfc.client import (
    ACCEPTED,
    LIFETIME,
    REJECTED,
    OpStat,
    Summarization,
    accepted_policy_digests,
    check_eligibility,
    export_verification_records,
    load_verification_records,
    participate,
    reverify_record,
    run_summarization,
    verify_and_upload,
)
from cfc.clock import HOUR
from cfc.errors import (
    BundleSignatureInvalid,
    ClockSkew,
    EvidenceRejected,
    PolicyInclusionMissing,
    PolicyNotEndorsed,
    SchemaMismatch,
)
from cfc.pipeline import StagedBlob
from cfc.policy import canonical_digest
from cfc.scenarios import phh_policy

from conftest import SUMMARIZATION, sample_table, select_spec


def store():
    return ClientTable.of(
        ("color", "food", "city"), ("weekdays", "weekends", "minutes"),
        [(("red", "apple", "oslo"), (3, 1, 20)), (("green", "eggs", "oslo"), (0, 2, 5)),
         (("red", "apple", "lima"), (1, 0, 7))])


@pytest.fixture
def task(world):
    return world.task(phh_policy(), SUMMARIZATION)


def test_eligibility_with_day_period(world, task):
    d = world.device("d", sample_table())
    now = world.clock()
    assert check_eligibility(d, task, now)
    d.opstats.append(OpStat(task.task_id, now))
    assert not check_eligibility(d, task, now + 10 * HOUR)
    assert check_eligibility(d, task, now + 25 * HOUR)
    assert check_eligibility(d, replace(task, task_id="other"), now + HOUR)


def test_eligibility_lifetime_and_unlimited(world, task):
    d = world.device("d", sample_table())
    d.opstats.append(OpStat(task.task_id, 0))
    assert not check_eligibility(d, replace(task, swor_period=LIFETIME), 10**15)
    assert check_eligibility(d, replace(task, swor_period=None), 1)


def test_participate_respects_period(world, task):
    d = world.device("d", sample_table())
    assert participate(d, task, world.client_rv) is not None
    assert participate(d, task, world.client_rv) is None
    world.clock.advance(25 * HOUR)
    assert participate(d, task, world.client_rv) is not None
    assert len(d.opstats) == 2


def test_summarization_projects_and_drops_columns(world, task):
    d = world.device("d", store())
    t = run_summarization(d, task)
    assert t.key_columns == ("color", "food") and t.value_columns == ("weekdays", "weekends")
    assert t.rows == ((("red", "apple"), (3.0, 1.0)), (("green", "eggs"), (0.0, 2.0)),
                      (("red", "apple"), (1.0, 0.0)))


def test_summarization_of_empty_store(world, task):
    empty = ClientTable(("color", "food"), ("weekdays", "weekends"))
    assert run_summarization(world.device("d", empty), task).rows == ()


def test_summarization_schema_mismatch(world, task):
    d = world.device("d", ClientTable(("color",), ("weekdays",)))
    with pytest.raises(SchemaMismatch):
        run_summarization(d, task)


def test_honest_upload_decrypts_through_pipeline(world, task):
    d = world.device("d", store())
    blob = verify_and_upload(d, task, world.client_rv)
    assert blob.header.policy_digest == canonical_digest(task.policy)
    assert blob.header.ledger_key_id == world.bundle.key_id
    out = world.factory(select_spec()).process([StagedBlob(blob)], world.ledger, task.policy)
    assert not out.failures and len(out.blobs) == 1
    assert [(r.verdict, r.failed_check) for r in d.records] == [(ACCEPTED, None)]
    assert d.opstats == [OpStat(task.task_id, world.clock())]


def test_device_clock_behind_ledger_key(world, task):
    d = world.device("d", sample_table())
    far = world.bundle.issued_at - 2 * task.skew_tolerance_ms
    with pytest.raises(ClockSkew):
        verify_and_upload(d, task, world.client_rv, now=far)
    within = world.bundle.issued_at - task.skew_tolerance_ms
    verify_and_upload(d, task, world.client_rv, now=within)


def test_device_clock_after_expiry(world, task):
    with pytest.raises(ClockSkew):
        verify_and_upload(world.device("d", sample_table()), task, world.client_rv, now=world.bundle.expiration)


def forged_evidence(world):
    ev = world.ledger.evidence
    chain = ev.chain.with_digest("application", bytes(32))
    return replace(ev, chain=chain)


@pytest.mark.parametrize("mutate,exc", [
    (lambda w, t: replace(t, ledger_evidence=forged_evidence(w)), EvidenceRejected),
    (lambda w, t: replace(t, ledger_endorsements=()), EvidenceRejected),
    (lambda w, t: replace(t, ledger_bundle=replace(t.ledger_bundle, expiration=t.ledger_bundle.expiration + 1)),
     BundleSignatureInvalid),
    (lambda w, t: replace(t, policy=phh_policy(usage_limit=2)), PolicyNotEndorsed),
    (lambda w, t: replace(t, policy_endorsement=w.endorse_and_log(canonical_digest(t.policy), SubjectKind.POLICY,
                                                                  log=False)), PolicyInclusionMissing),
    (lambda w, t: replace(t, policy_endorsement=w.endorse_and_log(canonical_digest(t.policy), SubjectKind.POLICY,
                                                                  signer=Ed25519PrivateKey.generate())),
     PolicyNotEndorsed),
])
def test_failed_checks_refuse_without_opstats(world, task, mutate, exc):
    d = world.device("d", sample_table())
    with pytest.raises(exc):
        verify_and_upload(d, mutate(world, task), world.client_rv)
    assert d.opstats == []
    (rec,) = d.records
    assert (rec.verdict, rec.failed_check) == (REJECTED, exc.check)


def test_records_round_trip_and_reverify(world, task):
    d = world.device("d", sample_table())
    verify_and_upload(d, task, world.client_rv)
    with pytest.raises(PolicyNotEndorsed):
        verify_and_upload(d, replace(task, policy=phh_policy(usage_limit=2)), world.client_rv)
    records = load_verification_records(export_verification_records(d))
    assert records == d.records
    assert [r.verdict for r in records] == [ACCEPTED, REJECTED]
    for r in records:
        assert reverify_record(r, world.client_rv) == (r.verdict, r.failed_check)
        assert reverify_record(r, world.client_rv, world.log.snapshot()) == (r.verdict, r.failed_check)
    assert accepted_policy_digests(records) == {canonical_digest(task.policy)}


def test_reverify_against_pruned_snapshot(world, task):
    d = world.device("d", sample_table())
    verify_and_upload(d, task, world.client_rv)
    snap = world.log.snapshot()
    pruned = replace(snap, endorsements=tuple(e for e in snap.endorsements
                                              if e.subject_kind != SubjectKind.POLICY))
    assert reverify_record(d.records[0], world.client_rv, pruned) == (REJECTED, "policy_inclusion_proof")


def test_records_are_canonical_lines(world, task):
    d = world.device("d", sample_table())
    verify_and_upload(d, task, world.client_rv)
    (line,) = export_verification_records(d).splitlines()
    assert canonical.dumps(canonical.loads(line)) == line


def test_summarization_spec_is_plain_data():
    assert Summarization(("a",), ("b",)) == Summarization(("a",), ("b",))
