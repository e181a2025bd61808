"""Command-line entry points.

Exit codes: 0 success, 1 usage or configuration error, 2 infrastructure failure
(unreadable inputs, missing indexes, unreachable backends).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from dualcare.agents import ConsultationRecord, run_consultation
from dualcare.config import ConfigError, SystemConfig, load_config, make_chat, make_embedder, make_pipeline
from dualcare.dataset import CaseFormatError, PatientCase, load_cases
from dualcare.dataset.fixture import FixtureSpec, generate_fixture
from dualcare.eval import (
    ABLATION_GRID,
    ablation_table,
    dumps,
    judge_evidence,
    run_ablation,
    run_bench,
    write_run,
)
from dualcare.kb import (
    ClassificationError,
    IndexBuildError,
    IndexLoadError,
    KnowledgeBase,
    build_indexes,
    load_corpus,
    load_knowledge_base,
    save_knowledge_base,
)
from dualcare.llm.errors import LLMError

EXIT_OK, EXIT_USAGE, EXIT_INFRA = 0, 1, 2

# failures that mean the environment, not the invocation, is broken
_INFRA_ERRORS = (OSError, IndexLoadError, IndexBuildError, ClassificationError, CaseFormatError, LLMError, ValueError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="YAML configuration file")
    p.add_argument("--seed", type=int, help="seed for mock embeddings and fixtures")
    p.add_argument("--workers", type=int, help="worker-pool width")
    p.add_argument("--mock", action="store_true", help="use offline mock backends for everything")
    p.add_argument("--script", type=Path, help="mock chat script (JSONL); implies a mock chat backend")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="dualcare", description="Doctor/pharmacist retrieval-augmented consultation pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-kb", parents=[common], help="classify, chunk and embed a corpus into two indexes")
    p.add_argument("corpus", type=Path)

    for name, helptext in (("bench", "consult and score every case"), ("ablate", "run the agent on/off grid")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("cases", type=Path)
        p.add_argument("--index-dir", type=Path, help="directory holding doctor.idx and pharmacist.idx")
        if name == "bench":
            p.add_argument("--judge", action="store_true", help="also score final evidence with the judge backend")
        else:
            p.add_argument(
                "--only",
                action="append",
                metavar="DOCTOR,PHARMACIST",
                help="restrict the grid, e.g. agent,naive (repeatable)",
            )

    p = sub.add_parser("consult", parents=[common], help="run one consultation and print its trace")
    p.add_argument("complaint")
    p.add_argument("--index-dir", type=Path)
    p.add_argument("--record", type=Path, help="also write the raw record as JSON")

    p = sub.add_parser("judge", parents=[common], help="judge the final evidence of a saved run")
    p.add_argument("run", type=Path, help="run.jsonl written by bench")
    p.add_argument("cases", type=Path)

    p = sub.add_parser("fixture", parents=[common], help="write a synthetic benchmark (cases, corpus, script)")
    p.add_argument("--n-cases", type=int, default=20)
    p.add_argument("--n-docs", type=int)
    p.add_argument("--free-text", action="store_true", help="cases without answer options")
    p.add_argument("--corrupt", type=int, nargs="*", default=[], metavar="I", help="cases whose drug answer is wrong")
    return parser


def _config(args) -> SystemConfig:
    cfg = load_config(args.config)
    update: dict = {}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        update["workers"] = args.workers
    if args.out is not None:
        update["out_dir"] = args.out
    cfg = cfg.model_copy(update=update)
    if args.mock:
        cfg = cfg.all_mock(args.script)
    elif args.script is not None:
        cfg = cfg.model_copy(update={"chat": cfg.chat.model_copy(update={"mock": True, "script": args.script, "base_url": None, "model": None})})
    return cfg


def _index_dir(args, cfg: SystemConfig) -> Path:
    return args.index_dir or cfg.index_dir or cfg.out_dir


def _load_kb(args, cfg: SystemConfig) -> KnowledgeBase:
    return load_knowledge_base(_index_dir(args, cfg), expected_dim=cfg.embed_dim)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_build_kb(args, cfg: SystemConfig) -> int:
    corpus = load_corpus(args.corpus)
    kb = build_indexes(
        corpus,
        make_embedder(cfg),
        make_chat(cfg.chat),
        max_chars=cfg.chunking.max_chars,
        overlap_chars=cfg.chunking.overlap_chars,
        workers=cfg.workers,
    )
    out = cfg.out_dir
    save_knowledge_base(kb, out)
    manifest = {
        "corpus_sha256": _sha256(args.corpus),
        "seed": cfg.seed,
        "embed_dim": cfg.embed_dim,
        "embed_model": "mock-hash" if cfg.embed.mock else cfg.embed.model,
        "chunking": cfg.chunking.model_dump(),
        "counts": {"documents": len(corpus), "doctor_chunks": len(kb.doctor), "pharmacist_chunks": len(kb.pharmacist)},
        "assignments": [
            {"doc_id": doc_id, "target": a.target.value, "source": a.source, "rationale": a.rationale}
            for doc_id, a in sorted(kb.assignments.items())
        ],
        "index_files": {name: _sha256(out / name) for name in ("doctor.idx", "pharmacist.idx")},
    }
    (out / "manifest.json").write_text(dumps(manifest), encoding="utf-8")
    print(f"built {len(kb.doctor)} doctor / {len(kb.pharmacist)} pharmacist chunks from {len(corpus)} documents -> {out}")
    return EXIT_OK


def _judge_chat(cfg: SystemConfig):
    return make_chat(cfg.judge) if cfg.judge is not None else None


def cmd_bench(args, cfg: SystemConfig) -> int:
    cases = load_cases(args.cases)
    kb = _load_kb(args, cfg)
    pipe = make_pipeline(cfg, kb)
    judge_backend = None
    if args.judge:
        judge_backend = _judge_chat(cfg) or pipe.chat
    records, report = run_bench(cases, pipe, workers=cfg.workers, label="bench", judge_backend=judge_backend)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_run(records, report.outcomes, out / "run.jsonl")
    (out / "report.json").write_text(dumps(report.to_dict()), encoding="utf-8")
    a = report.accuracy
    print(f"{a.n_cases} cases: top1={a.top1_acc:.4f} top3={a.top3_acc:.4f} drug={a.drug_acc:.4f} failed={report.n_failed}")
    infra = [r.case_id for r in records if r.infrastructure_error]
    if infra:
        print(f"infrastructure errors in {len(infra)} case(s): {', '.join(infra)}", file=sys.stderr)
        return EXIT_INFRA
    return EXIT_OK


def _parse_combo(text: str) -> tuple[bool, bool]:
    parts = [p.strip().lower() for p in text.split(",")]
    modes = {"agent": True, "on": True, "naive": False, "off": False}
    if len(parts) != 2 or any(p not in modes for p in parts):
        raise UsageError(f"--only expects DOCTOR,PHARMACIST with each agent|naive, got {text!r}")
    return modes[parts[0]], modes[parts[1]]


def cmd_ablate(args, cfg: SystemConfig) -> int:
    grid = [_parse_combo(o) for o in args.only] if args.only else list(ABLATION_GRID)
    cases = load_cases(args.cases)
    kb = _load_kb(args, cfg)
    reports = run_ablation(cases, make_pipeline(cfg, kb), grid, workers=cfg.workers)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    table = ablation_table(reports)
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    (out / "ablation.json").write_text(dumps([r.to_dict() for r in reports]), encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def format_record(rec: ConsultationRecord) -> str:
    """Human-readable trace, one section per stage."""
    lines: list[str] = []

    def head(title: str) -> None:
        lines.append(f"\n== {title} ==")

    d = rec.doctor
    head(f"doctor ({d.mode})")
    if d.plan:
        lines.append(f"department: {d.plan.department}")
        lines.extend(f"query: {q}" for q in d.plan.queries)
        lines.extend(f"flag: {f}" for f in d.plan.flags)
    _format_rounds(lines, d.reflection)
    if d.diagnosis:
        lines.append("diagnosis:")
        lines.extend(f"  {i}. {c}" for i, c in enumerate(d.diagnosis.conditions, 1))
    p = rec.pharmacist
    if p is not None:
        head(f"pharmacist ({p.mode})")
        if p.adoption:
            lines.append(f"adopted diagnosis: {'yes' if p.adoption.adopt else 'no'}")
        lines.extend(f"query: {q}" for q in p.queries)
        _format_rounds(lines, p.reflection)
        if p.medication:
            lines.append("medication:")
            lines.extend(f"  {i}. {drug}" for i, drug in enumerate((d for d, _ in p.medication.recommended), 1))
            if p.medication.selected_option:
                lines.append(f"selected option: {p.medication.selected_option}")
    if not rec.ok:
        head("failure")
        lines.append(f"stage: {rec.failed_stage}")
        lines.append(f"error: {rec.error}")
    return "\n".join(lines).lstrip("\n") + "\n"


def _format_rounds(lines: list[str], reflection) -> None:
    if reflection is None:
        return
    for r in reflection.rounds:
        rep = r.report
        conf = f" confidence={rep.overall:.2f}" if rep else ""
        lines.append(f"round {r.round}:{conf} evidence={', '.join(e.chunk_id for e in r.evidence) or '-'}")
    lines.append(f"best round: {reflection.best_round} ({reflection.stop_reason})")


def cmd_consult(args, cfg: SystemConfig) -> int:
    if not args.complaint.strip():
        raise UsageError("complaint must be non-empty")
    kb = _load_kb(args, cfg)
    # golds are unknown for an ad-hoc consultation; they are never read while consulting
    case = PatientCase("consult", args.complaint.strip(), "unknown", "unknown")
    rec = run_consultation(case, make_pipeline(cfg, kb))
    sys.stdout.write(format_record(rec))
    if args.record:
        args.record.parent.mkdir(parents=True, exist_ok=True)
        args.record.write_text(dumps(rec.to_dict()), encoding="utf-8")
    if rec.infrastructure_error:
        return EXIT_INFRA
    return EXIT_OK


def _run_evidence(path: Path) -> dict[str, dict[str, list[str]]]:
    evidence: dict[str, dict[str, list[str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)["record"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: not a run record: {exc}") from exc
            if not rec.get("ok"):
                continue
            roles = {}
            for role in ("doctor", "pharmacist"):
                trace = rec.get(role)
                if trace and trace.get("rounds"):
                    roles[role] = [d["text"] for d in trace["final_evidence"]]
            evidence[rec["case_id"]] = roles
    return evidence


def cmd_judge(args, cfg: SystemConfig) -> int:
    cases = load_cases(args.cases)
    evidence = _run_evidence(args.run)
    unknown = sorted(set(evidence) - {c.case_id for c in cases})
    if unknown:
        raise ValueError(f"run mentions cases not in {args.cases}: {', '.join(unknown[:5])}")
    backend = _judge_chat(cfg) or make_chat(cfg.chat)
    result = judge_evidence(evidence, cases, backend)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "judge.json").write_text(dumps(result), encoding="utf-8")
    for role, m in result["means"].items():
        print(f"{role}: relevance={m['mean_relevance']} contribution={m['mean_contribution']} n={m['n']}")
    return EXIT_OK


def cmd_fixture(args, cfg: SystemConfig) -> int:
    try:
        spec = FixtureSpec(
            seed=cfg.seed,
            n_cases=args.n_cases,
            n_docs=args.n_docs,
            option_based=not args.free_text,
            corrupt_pharmacist=tuple(args.corrupt),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    paths = generate_fixture(spec).write(cfg.out_dir)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


COMMANDS = {
    "build-kb": cmd_build_kb,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "consult": cmd_consult,
    "judge": cmd_judge,
    "fixture": cmd_fixture,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"dualcare: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _INFRA_ERRORS as exc:
        print(f"dualcare: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFRA


if __name__ == "__main__":
    sys.exit(main())
