"""Command-line entry point: ``ctrlmine <stage> ...``.

Exit status is 0 on success, 1 on a parse or configuration error and 2 when
``check`` finds a violated property.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import MiningError
from .frame import build_frames
from .invariant_engine import Checker, MinerConfig, default_config, mine_frames, parse_miner_config
from .pipeline import ingest_text, load_archives, replay_validator, run_pipeline, synth_trace_set, widths_of
from .postprocess import IntersectResult, run_postprocess
from .report import (
    MACHINE,
    PAPER_TEXT,
    PROPERTIES_FORMAT,
    PROPERTY_SETS_FORMAT,
    dump_property_sets,
    enforcement_histogram,
    load_property_sets,
    parse_machine,
    parse_mention_counts,
    render,
    spec_score,
)
from .signal_space import discover_candidates, format_candidates, parse_candidates, parse_space, unpack_set
from .synthcpu import ISA_DIRECTIVES, generate, inject_bug, load_builtin, parse_isa
from .trace_ingest import EffectsTable, parse_effects
from .trace_model import TraceSet, dumps_archive

logger = logging.getLogger("ctrlmine")

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2
PROVENANCE_FORMAT = "ctrlmine-provenance/1"


def _write(path: Optional[str], text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_isa(spec: str):
    if spec.startswith("builtin:"):
        return load_builtin(spec.split(":", 1)[1])
    return parse_isa(Path(spec).read_text())


def _load_config(path: Optional[str]) -> MinerConfig:
    return parse_miner_config(Path(path).read_text()) if path else default_config()


def provenance_text(result: IntersectResult) -> str:
    lines = [json.dumps({"format": PROVENANCE_FORMAT})]
    for p in result.merged:
        for c in p.clauses:
            lines.append(json.dumps({"precondition": str(p.precondition), "clause": str(c),
                                     "enforced_by": sorted(p.enforced_by)}))
    for pc, c, labels in result.partial:
        lines.append(json.dumps({"precondition": str(pc), "clause": str(c), "enforced_by": sorted(labels)}))
    return "\n".join(lines) + "\n"


def _load_provenance(text: str) -> list[frozenset[str]]:
    lines = text.splitlines()
    if not lines or json.loads(lines[0]).get("format") != PROVENANCE_FORMAT:
        raise MiningError("not a provenance file")
    return [frozenset(json.loads(ln)["enforced_by"]) for ln in lines[1:] if ln.strip()]


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    isa = _load_isa(args.isa)
    for rule in args.bug or ():
        isa = inject_bug(isa, rule)
    _write(args.output, generate(isa, args.profile, args.seed, args.length))
    if args.effects_out:
        Path(args.effects_out).write_text(isa.effects_text())
    if args.space_out:
        Path(args.space_out).write_text(isa.space.to_config())
    return EXIT_OK


def cmd_ingest(args) -> int:
    space = parse_space(Path(args.space).read_text(), ignore_unknown=ISA_DIRECTIVES)
    effects = parse_effects(Path(args.effects).read_text()) if args.effects else EffectsTable()
    traces = []
    for path in args.traces:
        label = args.label or Path(path).stem
        traces.append(ingest_text(Path(path).read_text(), space, effects, label))
    _write(args.output, dumps_archive(TraceSet(tuple(traces), space)))
    return EXIT_OK


def cmd_discover(args) -> int:
    ts = unpack_set(load_archives(args.archives))
    _write(args.output, format_candidates(discover_candidates(ts)))
    return EXIT_OK


def cmd_mine(args) -> int:
    ts = unpack_set(load_archives(args.archives))
    cands = parse_candidates(Path(args.candidates).read_text()) if args.candidates else discover_candidates(ts)
    per_label = mine_frames(build_frames(ts), cands, _load_config(args.config), args.workers)
    _write(args.output, dump_property_sets(per_label))
    return EXIT_OK


def cmd_post(args) -> int:
    per_label = load_property_sets(Path(args.properties).read_text())
    cands = parse_candidates(Path(args.candidates).read_text())
    widths, validate = None, None
    if args.archive:
        ts = unpack_set(load_archives(args.archive))
        widths = widths_of(ts.signal_space)
        validate = replay_validator(Checker(ts))
    else:
        logger.warning("no --archive given: closure and globals are not replay-validated")
    spec = run_postprocess(per_label, cands, widths, validate=validate)
    _write(args.output, render(spec.final, MACHINE))
    if args.provenance:
        Path(args.provenance).write_text(provenance_text(spec.intersected))
    return EXIT_OK


def _load_checkable(text: str) -> list:
    head = json.loads(text.splitlines()[0]) if text.strip() else {}
    if head.get("format") == PROPERTY_SETS_FORMAT:
        return [p for ps in load_property_sets(text).values() for p in ps]
    if head.get("format") == PROPERTIES_FORMAT:
        return parse_machine(text)
    raise MiningError("property file has an unknown format")


def cmd_check(args) -> int:
    props = _load_checkable(Path(args.properties).read_text())
    checker = Checker(unpack_set(load_archives(args.archives)))
    violated = 0
    out = []
    for p in props:
        v = checker.check(p)
        violated += v.status == "violated"
        out.append(f"{v.status}\t{p.precondition}\t{v}")
    out.append(f"# {len(props)} properties, {violated} violated")
    _write(args.output, "\n".join(out) + "\n")
    return EXIT_VIOLATION if violated else EXIT_OK


def cmd_report(args) -> int:
    props = _load_checkable(Path(args.properties).read_text())
    parts = []
    if args.style or not (args.score or args.histogram):
        parts.append(render(props, args.style or PAPER_TEXT))
    if args.score:
        parts.append(spec_score(props, parse_mention_counts(Path(args.score).read_text())).to_text())
    if args.histogram:
        parts.append(enforcement_histogram(_load_provenance(Path(args.histogram).read_text())).to_text())
    _write(args.output, "".join(parts))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    if args.archives:
        ts = load_archives(args.archives)
    else:
        isa = _load_isa(args.isa)
        for rule in args.bug or ():
            isa = inject_bug(isa, rule)
        profiles = args.profiles or sorted(isa.profiles)
        ts = synth_trace_set(isa, profiles, args.seed, args.length)
    (out / "traces.json").write_text(dumps_archive(ts))
    result = run_pipeline(ts, config=_load_config(args.config), workers=args.workers)
    (out / "candidates.txt").write_text(format_candidates(result.candidates))
    (out / "mined.jsonl").write_text(dump_property_sets(result.per_label))
    final = result.spec.final
    (out / "spec.jsonl").write_text(render(final, MACHINE))
    (out / "spec.txt").write_text(render(final, PAPER_TEXT))
    (out / "provenance.jsonl").write_text(provenance_text(result.spec.intersected))
    hist = enforcement_histogram(result.spec.intersected.provenance())
    (out / "histogram.txt").write_text(hist.to_text())
    if args.score:
        counts = parse_mention_counts(Path(args.score).read_text())
        (out / "scores.txt").write_text(spec_score(final, counts).to_text())
    distinguishing = result.spec.split.distinguishing
    summary = {
        "events": result.trace_set.event_count,
        "labels": list(result.trace_set.labels),
        "candidates": len(result.candidates),
        "raw_clauses": result.raw_clause_count,
        "final_properties": len(final),
        "global_properties": len(result.spec.split.globals),
        "distinguishing": distinguishing,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctrlmine", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a mock-CPU trace")
    p.add_argument("isa", help="ISA file, or builtin:default / builtin:gating")
    p.add_argument("--profile", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--bug", action="append", help="rule id to break (repeatable)")
    p.add_argument("--effects-out")
    p.add_argument("--space-out")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse and extend .atrc logs into an archive")
    p.add_argument("traces", nargs="+")
    p.add_argument("--space", required=True)
    p.add_argument("--effects")
    p.add_argument("--label", help="origin label (default: file stem)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("discover", help="list candidate control signals")
    p.add_argument("archives", nargs="+")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("mine", help="mine per-label property sets")
    p.add_argument("archives", nargs="+")
    p.add_argument("--candidates")
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("post", help="reduce property sets to a specification")
    p.add_argument("properties")
    p.add_argument("--candidates", required=True)
    p.add_argument("--archive", action="append", help="trace archive for replay validation")
    p.add_argument("--provenance", help="write per-clause enforcing labels here")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_post)

    p = sub.add_parser("check", help="replay properties against traces")
    p.add_argument("properties")
    p.add_argument("archives", nargs="+")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("report", help="render properties, scores and histograms")
    p.add_argument("properties")
    p.add_argument("--style", choices=(PAPER_TEXT, MACHINE))
    p.add_argument("--score", help="mention counts file")
    p.add_argument("--histogram", help="provenance file written by post")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run every stage")
    p.add_argument("archives", nargs="*")
    p.add_argument("--isa", default="builtin:default")
    p.add_argument("--profiles", nargs="*")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--bug", action="append")
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--score")
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BrokenPipeError:
        # reader went away (e.g. piped into head); not an error of ours
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except (MiningError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
