"""``cfc`` command line: scenarios, offline record verification, log monitoring.

Reports go to stdout as one canonical JSON object per line; a human summary
goes to stderr.  Exit codes: 0 success, 1 verdict failure, 2 usage or parse
error.  ``--seed`` and ``--noise-off`` exist only in test builds, selected by
``CFC_TEST_BUILD=1`` in the environment.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Sequence

from . import canonical
from .attestation import ReferenceValues, SubjectKind
from .client import accepted_policy_digests, export_verification_records, load_verification_records, reverify_record
from .errors import CfcError
from .policy import AccessPolicy
from .scenarios import DEFAULT_TTL_MS, SCENARIOS, ScenarioConfig, run_scenario
from .transparency import LogSnapshot

EXIT_OK, EXIT_VERDICT, EXIT_USAGE = 0, 1, 2


def test_build() -> bool:
    return os.environ.get("CFC_TEST_BUILD") == "1"


class UsageError(Exception):
    pass


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from exc


def _load_json(path: str):
    try:
        return canonical.loads(_read(path))
    except ValueError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from exc


def _emit(lines: Sequence[str], out) -> None:
    for line in lines:
        out.write(line + "\n")


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(args, out, err) -> int:
    if (args.seed is not None or args.noise_off) and not test_build():
        raise UsageError("--seed and --noise-off are only available in test builds (CFC_TEST_BUILD=1)")
    if args.noise_off and args.seed is None:
        raise UsageError("--noise-off requires --seed")
    query_text = _read(args.query) if args.query else None
    policy = None
    if args.policy:
        try:
            policy = AccessPolicy.from_text(_read(args.policy))
        except CfcError as exc:
            raise UsageError(f"{args.policy}: {exc}") from exc
    cfg = ScenarioConfig(args.scenario, devices=args.devices, query_text=query_text, policy=policy,
                         seed=args.seed, noise_off=args.noise_off, skew_ms=args.skew_ms, ttl_ms=args.ttl_ms)
    try:
        report = run_scenario(cfg)
    except CfcError as exc:
        if exc.cause in ("QuerySyntaxError", "QuerySemanticError") or "Policy" in exc.cause:
            raise UsageError(f"{exc.cause}: {exc}") from exc
        raise
    lines = report.lines()
    _emit(lines, out)
    if args.out:
        d = Path(args.out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.jsonl").write_text("".join(line + "\n" for line in lines))
        (d / "records.jsonl").write_text("".join(export_verification_records(dev) for dev in report.devices))
        if report.world is not None:
            (d / "reference_values.json").write_text(canonical.dumps(report.world.client_rv))
            (d / "log_snapshot.json").write_text(canonical.dumps(report.world.log.snapshot()))
            (d / "publisher_key_id.txt").write_text(report.world.publisher_key_id.hex() + "\n")
    err.write(report.summary() + "\n")
    return EXIT_OK if report.exit_code == 0 else EXIT_VERDICT


# ---------------------------------------------------------------------------
# verify-records
# ---------------------------------------------------------------------------

def cmd_verify_records(args, out, err) -> int:
    try:
        records = load_verification_records(_read(args.records))
        rv = ReferenceValues.from_dict(_load_json(args.reference_values))
        snapshot = LogSnapshot.from_dict(_load_json(args.log_snapshot)) if args.log_snapshot else None
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed input: {exc}") from exc
    mismatches = 0
    for i, r in enumerate(records):
        verdict, check = reverify_record(r, rv, snapshot)
        match = (verdict, check) == (r.verdict, r.failed_check)
        mismatches += not match
        _emit([canonical.dumps({"kind": "record", "index": i, "device_id": r.device_id, "task_id": r.task_id,
                                "recorded": {"verdict": r.verdict, "failed_check": r.failed_check},
                                "reverified": {"verdict": verdict, "failed_check": check}, "match": match})], out)
    _emit([canonical.dumps({"kind": "summary", "records": len(records), "mismatches": mismatches})], out)
    err.write(f"verify-records: {len(records)} record(s), {mismatches} mismatch(es)\n")
    return EXIT_OK if mismatches == 0 else EXIT_VERDICT


# ---------------------------------------------------------------------------
# monitor-log
# ---------------------------------------------------------------------------

def cmd_monitor_log(args, out, err) -> int:
    try:
        snapshot = LogSnapshot.from_dict(_load_json(args.snapshot))
        signer = bytes.fromhex(args.signer)
        accepted = accepted_policy_digests(load_verification_records(_read(args.records))) if args.records else set()
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed input: {exc}") from exc
    consistent = snapshot.is_consistent()
    entries = snapshot.monitor_by_signer(signer)
    logged_policies = set()
    for e in entries:
        kind = SubjectKind(e.endorsement.subject_kind)
        if kind is SubjectKind.POLICY:
            logged_policies.add(e.endorsement.subject_digest)
        _emit([canonical.dumps({"kind": "entry", "index": e.index, "subject_kind": kind.value,
                                "subject_digest": e.endorsement.subject_digest.hex()})], out)
    missing = sorted(accepted - logged_policies)
    for m in missing:
        _emit([canonical.dumps({"kind": "missing", "policy_digest": m.hex()})], out)
    ok = consistent and not missing
    _emit([canonical.dumps({"kind": "summary", "entries": len(entries), "snapshot_consistent": consistent,
                            "accepted_policies": len(accepted), "missing": len(missing), "coverage_complete": ok})],
          out)
    err.write(f"monitor-log: {len(entries)} entr(ies) by signer, {len(missing)} accepted polic(ies) missing"
              f"{'' if consistent else ', snapshot INCONSISTENT'}\n")
    return EXIT_OK if ok else EXIT_VERDICT


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cfc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an end-to-end or attack scenario")
    run.add_argument("--scenario", required=True, choices=sorted(SCENARIOS))
    run.add_argument("--devices", type=int)
    run.add_argument("--query", help="DP query file (default: the bundled sample query)")
    run.add_argument("--policy", help="access policy file in canonical JSON")
    run.add_argument("--seed", type=int, help=argparse.SUPPRESS if not test_build() else "fixed seed (test builds)")
    run.add_argument("--noise-off", action="store_true",
                     help=argparse.SUPPRESS if not test_build() else "disable DP noise (test builds)")
    run.add_argument("--skew-ms", type=int, help="ledger clock skew for attack-clock-skew")
    run.add_argument("--ttl-ms", type=int, default=DEFAULT_TTL_MS, help="ledger key lifetime")
    run.add_argument("--out", help="directory for report, records, reference values and log snapshot")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify-records", help="re-verify exported attestation verification records")
    ver.add_argument("records")
    ver.add_argument("--reference-values", required=True)
    ver.add_argument("--log-snapshot")
    ver.set_defaults(func=cmd_verify_records)

    mon = sub.add_parser("monitor-log", help="list a signer's endorsements in a log snapshot")
    mon.add_argument("snapshot")
    mon.add_argument("--signer", required=True, help="signer key id (hex)")
    mon.add_argument("--records", help="records whose accepted policies must all be logged")
    mon.set_defaults(func=cmd_monitor_log)
    return p


def main(argv: Sequence[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "devices", None) is not None and args.devices < 1:
        err.write("cfc: --devices must be >= 1\n")
        return EXIT_USAGE
    try:
        return args.func(args, out, err)
    except UsageError as exc:
        err.write(f"cfc: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
