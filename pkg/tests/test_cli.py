from __future__ import annotations

import json

import pytest

from ctrlmine.cli import EXIT_ERROR, EXIT_OK, EXIT_VIOLATION, main
from ctrlmine.partition import parse_precondition
from ctrlmine.postprocess import EqualityClassProperty
from ctrlmine.report import MACHINE, parse_machine, render


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthesize and ingest two short traces once for the whole module."""
    d = tmp_path_factory.mktemp("cli")
    for profile in ("osA", "osB"):
        rc = main([
            "synth", "builtin:default", "--profile", profile, "--seed", "3", "--length", "800",
            "--effects-out", str(d / "effects.txt"), "--space-out", str(d / "space.cfg"),
            "-o", str(d / f"{profile}.atrc"),
        ])
        assert rc == EXIT_OK
    rc = main([
        "ingest", str(d / "osA.atrc"), str(d / "osB.atrc"),
        "--space", str(d / "space.cfg"), "--effects", str(d / "effects.txt"), "-o", str(d / "arch.json"),
    ])
    assert rc == EXIT_OK
    return d


def test_synth_is_deterministic(workdir, tmp_path):
    out = tmp_path / "again.atrc"
    assert main(["synth", "builtin:default", "--profile", "osA", "--seed", "3", "--length", "800", "-o", str(out)]) == 0
    assert out.read_text() == (workdir / "osA.atrc").read_text()


def test_mine_post_check_report(workdir):
    d = workdir
    assert main(["discover", str(d / "arch.json"), "-o", str(d / "cands.txt")]) == EXIT_OK
    assert (d / "cands.txt").read_text().strip()
    assert main(["mine", str(d / "arch.json"), "--candidates", str(d / "cands.txt"), "-o", str(d / "mined.jsonl")]) == 0
    assert main([
        "post", str(d / "mined.jsonl"), "--candidates", str(d / "cands.txt"), "--archive", str(d / "arch.json"),
        "--provenance", str(d / "prov.jsonl"), "-o", str(d / "spec.jsonl"),
    ]) == EXIT_OK
    spec = parse_machine((d / "spec.jsonl").read_text())
    assert spec
    assert main(["check", str(d / "spec.jsonl"), str(d / "arch.json"), "-o", str(d / "check.txt")]) == EXIT_OK
    assert (d / "check.txt").read_text().splitlines()[-1] == f"# {len(spec)} properties, 0 violated"
    # raw per-label sets do not carry over to the other label's traces
    assert main(["check", str(d / "mined.jsonl"), str(d / "arch.json"), "-o", str(d / "check2.txt")]) == EXIT_VIOLATION

    (d / "counts.txt").write_text("CPL 10\nSMM 4\n")
    assert main([
        "report", str(d / "spec.jsonl"), "--style", "paper_text", "--score", str(d / "counts.txt"),
        "--histogram", str(d / "prov.jsonl"), "-o", str(d / "report.txt"),
    ]) == EXIT_OK
    text = (d / "report.txt").read_text()
    assert text.startswith(f"# {len(spec)} properties") and "enforcing_labels clauses" in text
    assert f"properties {len(spec)}" in text


def test_check_reports_violation(workdir, tmp_path):
    prop = EqualityClassProperty(parse_precondition("call"), ((0, "SMM"),))
    (tmp_path / "p.jsonl").write_text(render([prop], MACHINE))
    buggy = tmp_path / "bug.atrc"
    assert main([
        "synth", "builtin:default", "--profile", "osA", "--seed", "3", "--length", "800", "--bug", "smm-no-call",
        "-o", str(buggy),
    ]) == EXIT_OK
    assert main([
        "ingest", str(buggy), "--space", str(workdir / "space.cfg"), "--effects", str(workdir / "effects.txt"),
        "-o", str(tmp_path / "bug.json"),
    ]) == EXIT_OK
    assert main(["check", str(tmp_path / "p.jsonl"), str(workdir / "arch.json"), "-o", str(tmp_path / "ok")]) == 0
    rc = main(["check", str(tmp_path / "p.jsonl"), str(tmp_path / "bug.json"), "-o", str(tmp_path / "bad")])
    assert rc == EXIT_VIOLATION
    assert (tmp_path / "bad").read_text().startswith("violated")


def test_pipeline(tmp_path, capsys):
    out = tmp_path / "run"
    rc = main([
        "pipeline", "--profiles", "osA", "baremetal", "--seed", "5", "--length", "300", "--outdir", str(out),
    ])
    assert rc == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["labels"] == ["osA", "baremetal"] and summary["events"] == 600
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == summary
    for name in ("traces.json", "candidates.txt", "mined.jsonl", "spec.jsonl", "spec.txt", "histogram.txt"):
        assert (out / name).exists()
    assert len(parse_machine((out / "spec.jsonl").read_text())) == summary["final_properties"]
    assert main(["pipeline", str(out / "traces.json"), "--outdir", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "spec.jsonl").read_text() == (out / "spec.jsonl").read_text()


@pytest.mark.parametrize(
    "argv",
    [
        ["synth", "builtin:default", "--profile", "plan9"],
        ["synth", "builtin:nope", "--profile", "osA"],
        ["synth", "builtin:default", "--profile", "osA", "--bug", "cpl-dpl"],
        ["discover", "/nonexistent/archive.json"],
    ],
)
def test_errors_give_error_exit_code(argv, capsys):
    assert main(argv) == EXIT_ERROR
    assert capsys.readouterr().err.startswith("error:")


def test_malformed_trace(workdir, tmp_path):
    bad = tmp_path / "bad.atrc"
    bad.write_text("this is not a trace\n")
    rc = main(["ingest", str(bad), "--space", str(workdir / "space.cfg"), "-o", str(tmp_path / "x.json")])
    assert rc == EXIT_ERROR


def test_bad_property_file(workdir, tmp_path):
    (tmp_path / "p.jsonl").write_text('{"format": "something"}\n')
    assert main(["check", str(tmp_path / "p.jsonl"), str(workdir / "arch.json")]) == EXIT_ERROR


def test_usage_error():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
