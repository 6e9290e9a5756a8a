import io
import json

import pytest

from cfc import canonical, cli
from cfc.scenarios import SCENARIOS


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    rc = cli.main(list(argv), out, err)
    return rc, out.getvalue(), err.getvalue()


def lines(text):
    return [json.loads(line) for line in text.splitlines()]


@pytest.fixture
def test_build(monkeypatch):
    monkeypatch.setenv("CFC_TEST_BUILD", "1")


@pytest.fixture
def phh_out(test_build, tmp_path):
    rc, out, _ = run("run", "--scenario", "phh", "--seed", "7", "--noise-off", "--devices", "20",
                     "--out", str(tmp_path))
    assert rc == 0
    return tmp_path


@pytest.mark.parametrize("scenario", sorted(SCENARIOS))
def test_every_scenario_passes(test_build, scenario):
    rc, out, err = run("run", "--scenario", scenario, "--seed", "7", "--noise-off")
    assert rc == 0, err
    report = lines(out)
    assert report[0]["kind"] == "scenario" and report[0]["name"] == scenario
    assert report[-1] == {"kind": "summary", "exit_code": 0, "failed": []}
    checks = [r for r in report if r["kind"] == "check"]
    assert checks and all(c["ok"] for c in checks)
    assert err.startswith(f"{scenario}: OK")


def test_scenario_output_is_deterministic(test_build):
    a = run("run", "--scenario", "phh", "--seed", "7", "--devices", "30")
    b = run("run", "--scenario", "phh", "--seed", "7", "--devices", "30")
    assert a[1] == b[1]
    c = run("run", "--scenario", "phh", "--seed", "8", "--devices", "30")
    assert a[1] != c[1]


def test_phh_release_matches_oracle(phh_out):
    report = lines((phh_out / "report.jsonl").read_text())
    (check,) = [r for r in report if r.get("name") == "release_matches_oracle"]
    assert check["ok"]
    (release,) = [r for r in report if r["kind"] == "release"]
    assert release["type"] == "histogram"
    assert release["output_names"] == ["total_num_purchased_weekdays", "total_num_purchased_weekends"]


def test_out_directory_contents(phh_out):
    names = {p.name for p in phh_out.iterdir()}
    assert names == {"report.jsonl", "records.jsonl", "reference_values.json", "log_snapshot.json",
                     "publisher_key_id.txt"}
    assert len((phh_out / "records.jsonl").read_text().splitlines()) == 20


def test_seed_requires_test_build(monkeypatch):
    monkeypatch.delenv("CFC_TEST_BUILD", raising=False)
    rc, _, err = run("run", "--scenario", "phh", "--seed", "7")
    assert rc == 2 and "test builds" in err
    rc, _, _ = run("run", "--scenario", "phh", "--noise-off")
    assert rc == 2


@pytest.mark.parametrize("argv", [
    [],
    ["run"],
    ["run", "--scenario", "nope"],
    ["run", "--scenario", "phh", "--devices", "0"],
    ["run", "--scenario", "phh", "--devices", "x"],
    ["run", "--scenario", "phh", "--query", "/nonexistent.dpsql"],
    ["verify-records", "/nonexistent", "--reference-values", "/nonexistent"],
    ["monitor-log", "/nonexistent", "--signer", "00"],
])
def test_usage_errors(test_build, argv):
    assert run(*argv)[0] == 2


def test_noise_off_requires_seed(test_build):
    assert run("run", "--scenario", "phh", "--noise-off")[0] == 2


def test_bad_query_is_usage_error(test_build, tmp_path):
    q = tmp_path / "q.dpsql"
    q.write_text("SELECT color FROM t")
    rc, _, err = run("run", "--scenario", "phh", "--seed", "1", "--query", str(q))
    assert rc == 2 and "QuerySyntaxError" in err


# --- verify-records ---------------------------------------------------------

def verify(d, records=None, snapshot=True):
    argv = ["verify-records", str(records or d / "records.jsonl"),
            "--reference-values", str(d / "reference_values.json")]
    if snapshot:
        argv += ["--log-snapshot", str(snapshot if snapshot is not True else d / "log_snapshot.json")]
    return run(*argv)


def test_verify_records_honest(phh_out):
    for snap in (True, False):
        rc, out, _ = verify(phh_out, snapshot=snap)
        assert rc == 0
        assert lines(out)[-1] == {"kind": "summary", "records": 20, "mismatches": 0}


def test_verify_records_edited_policy_digest(phh_out, tmp_path):
    recs = (phh_out / "records.jsonl").read_text().splitlines()
    first = json.loads(recs[0])
    first["policy_digest"] = canonical.b64e(bytes(32))
    edited = tmp_path / "edited.jsonl"
    edited.write_text("\n".join([canonical.dumps(first), *recs[1:]]) + "\n")
    rc, out, _ = verify(phh_out, records=edited)
    assert rc == 1
    report = lines(out)
    assert report[0]["match"] is False
    assert report[0]["reverified"] == {"verdict": "rejected", "failed_check": "policy_endorsement"}
    assert report[-1]["mismatches"] == 1


def pruned_snapshot(d, tmp_path):
    snap = json.loads((d / "log_snapshot.json").read_text())
    snap["entries"] = [e for e in snap["entries"] if e["subject_kind"] != "access-policy"]
    path = tmp_path / "pruned.json"
    path.write_text(canonical.dumps(snap))
    return path


def test_verify_records_against_pruned_snapshot(phh_out, tmp_path):
    rc, out, _ = verify(phh_out, snapshot=pruned_snapshot(phh_out, tmp_path))
    assert rc == 1
    report = lines(out)
    assert all(r["reverified"]["failed_check"] == "policy_inclusion_proof" for r in report[:-1])
    assert report[-1]["mismatches"] == 20


# --- monitor-log ------------------------------------------------------------

def monitor(snapshot, signer, records=None):
    argv = ["monitor-log", str(snapshot), "--signer", signer]
    if records:
        argv += ["--records", str(records)]
    return run(*argv)


def test_monitor_log_honest_coverage(phh_out):
    signer = (phh_out / "publisher_key_id.txt").read_text().strip()
    rc, out, _ = monitor(phh_out / "log_snapshot.json", signer, phh_out / "records.jsonl")
    assert rc == 0
    report = lines(out)
    kinds = [r["subject_kind"] for r in report if r["kind"] == "entry"]
    assert kinds.count("access-policy") == 1 and "application-binary" in kinds
    assert report[-1]["coverage_complete"] is True and report[-1]["accepted_policies"] == 1


def test_monitor_log_flags_unlogged_policy(phh_out, tmp_path):
    signer = (phh_out / "publisher_key_id.txt").read_text().strip()
    rc, out, _ = monitor(pruned_snapshot(phh_out, tmp_path), signer, phh_out / "records.jsonl")
    assert rc == 1
    report = lines(out)
    missing = [r for r in report if r["kind"] == "missing"]
    assert len(missing) == 1
    assert report[-1]["coverage_complete"] is False


def test_monitor_log_other_signer_sees_nothing(phh_out):
    rc, out, _ = monitor(phh_out / "log_snapshot.json", "00" * 16)
    assert rc == 0 and lines(out)[-1]["entries"] == 0


def test_monitor_log_empty_snapshot(phh_out, tmp_path):
    snap = json.loads((phh_out / "log_snapshot.json").read_text())
    from cfc.transparency import LogSnapshot
    empty = LogSnapshot(canonical.b64d(snap["log_public_key"]))
    path = tmp_path / "empty.json"
    path.write_text(canonical.dumps(empty))
    rc, out, _ = monitor(path, "00" * 16)
    assert rc == 0
    assert lines(out) == [{"kind": "summary", "entries": 0, "snapshot_consistent": True, "accepted_policies": 0,
                           "missing": 0, "coverage_complete": True}]
