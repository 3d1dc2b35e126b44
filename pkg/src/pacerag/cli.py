"""Command-line entry point: ``pacerag <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 backend error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from pacerag.cohort import AtcMapping, CohortError, DrugSet, build_history_window, write_cohort
from pacerag.config import ConfigError, RunConfig, SweepSpec, load_config
from pacerag.evaluation import (
    METRICS,
    EvalError,
    JudgeCase,
    MetricReport,
    PrecisionAtK,
    SignificanceResult,
    aggregate,
    drug_precision_at_k,
    judge_keyword_relevance,
    paired_t_test,
    precision_at_k_curve,
    score_manifest_rows,
    summarize_judgements,
    write_precision_csv,
    write_report_csv,
    write_report_json,
)
from pacerag.ingest import ingest_mimic, ingest_soap
from pacerag.llm import BackendError, GenerationParams, ReplayBackend
from pacerag.pipeline import (
    PipelineError,
    PoolLeakage,
    StageError,
    history_slot,
    note_text,
    rank_treatrag,
    replay_call,
    treatrag_candidates,
    treatrag_query,
)
from pacerag.retrieval import (
    BM25Index,
    DenseIndex,
    RetrievalError,
    build_pool_entries,
    chunk_guidelines,
    guideline_entries,
    make_embedder,
)
from pacerag.runs import (
    EFFECTIVE_CONFIG,
    DataError,
    RunLocked,
    build_indexes,
    build_runtime,
    find_manifests,
    load_inputs,
    make_backend,
    read_manifest,
    run_all_seeds,
    run_dir,
    targets,
    visit_row,
)
from pacerag.scripted import build_script_table
from pacerag.synth import (
    InvalidSynthConfig,
    SynthConfig,
    default_synth_config,
    generate_synthetic_cohort,
    synthetic_guidelines,
)

log = logging.getLogger("pacerag")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared option handling


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run configuration (INI)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--method", help="pace | zero_shot | guideline | treatrag | medreflect")
    p.add_argument("--backend-url", help="use an OpenAI-compatible endpoint at this base URL")
    p.add_argument("--k", type=int, help="retrieval top-k")
    p.add_argument("--tau", type=float, help="retrieval similarity threshold")
    p.add_argument("--focus-cap", type=int, help="maximum number of focus queries")
    p.add_argument("--parallelism", type=int, help="concurrent visits")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "method", None):
        cfg = cfg.with_updates("run", method=args.method)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seeds([args.seed])
    if getattr(args, "backend_url", None):
        cfg = cfg.with_updates("backend", kind="http", url=args.backend_url)
    if getattr(args, "k", None) is not None:
        cfg = cfg.with_updates("retrieval", k=args.k)
    if getattr(args, "tau", None) is not None:
        cfg = cfg.with_updates("retrieval", tau=args.tau)
    if getattr(args, "focus_cap", None) is not None:
        cfg = cfg.with_updates("retrieval", focus_cap=args.focus_cap)
    if getattr(args, "parallelism", None) is not None:
        cfg = cfg.with_updates("backend", parallelism=args.parallelism)
    return cfg


# ---------------------------------------------------------------------------
# synth / ingest / index


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty; pass --force to overwrite")
    synth = SynthConfig.load(args.synth_config) if args.synth_config else default_synth_config()
    if args.n_patients:
        synth = SynthConfig.from_dict({**synth.to_dict(), "n_patients": args.n_patients})
    if args.flavor:
        synth = SynthConfig.from_dict({**synth.to_dict(), "flavor": args.flavor})
    synth.validate()
    cohort, oracle = generate_synthetic_cohort(synth, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_cohort(cohort, out / "cohort.jsonl")
    (out / "oracle.json").write_text(json.dumps(oracle.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "synth_config.json").write_text(json.dumps(synth.to_dict(), indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    (out / "guidelines.txt").write_text(synthetic_guidelines(synth), encoding="utf-8")
    build_script_table(synth, noise=args.noise).save(out / "script.json")
    cfg = RunConfig().with_updates("run", flavor=synth.flavor, backbone="scripted")
    cfg = cfg.with_updates("backend", kind="scripted", script="script.json")
    cfg = cfg.with_updates("retrieval", segmentation="sentence")
    cfg = cfg.with_updates("paths", cohort="cohort.jsonl", guidelines="guidelines.txt", runs_dir="runs")
    cfg.write(out / "run.ini")
    print(f"wrote {len(cohort)} patients / {cohort.n_visits} visits to {out} (config: {out / 'run.ini'})")
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace) -> int:
    if args.flavor == "diagnosis":
        if not args.mapping:
            raise UsageError("--mapping is required for the diagnosis flavor")
        if not Path(args.mapping).exists():
            raise DataError(f"mapping file not found: {args.mapping}")
        cohort, report = ingest_mimic(args.source, AtcMapping.load(args.mapping))
    else:
        cohort, report = ingest_soap(args.source)
    if not len(cohort):
        raise DataError("ingestion produced no patients")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(cohort, out)
    report_path = out.with_suffix(".report.json")
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_index(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.index_dir or "index")
    target = out / args.kind
    if target.exists() and not args.force:
        raise UsageError(f"{target} exists; pass --force to rebuild")
    r = cfg.retrieval
    if args.kind == "guideline":
        inputs_text = load_inputs(cfg).guidelines if cfg.paths.cohort else ""
        if not inputs_text and cfg.paths.guidelines:
            inputs_text = cfg.resolve(cfg.paths.guidelines).read_text(encoding="utf-8")
        if not inputs_text.strip():
            raise DataError("no guideline text configured")
        entries = guideline_entries(chunk_guidelines(inputs_text, r.chunk_size, r.chunk_overlap))
        DenseIndex.build(entries, make_embedder(r.embedder)).save(target)
    else:
        inputs = load_inputs(cfg)
        entries = build_pool_entries(inputs.pool, r.scope, r.segmentation)
        if not entries:
            raise DataError("retrieval pool is empty")
        if args.kind == "dense":
            DenseIndex.build(entries, make_embedder(r.embedder)).save(target)
        else:
            BM25Index(entries).save(target)
    print(f"{args.kind} index with {len(entries)} entries -> {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# run / eval / sweep


def _clear_seed_dirs(cfg: RunConfig, root: Path | None = None) -> None:
    for seed in cfg.run.seeds:
        d = run_dir(cfg, seed, root)
        if d.exists():
            shutil.rmtree(d)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    if args.force:
        _clear_seed_dirs(cfg)
    for res in run_all_seeds(cfg):
        f1 = res.metrics["scores"].get("f1", float("nan"))
        print(f"{cfg.run.method}/{cfg.backbone}/{res.metrics['seed']}: {res.n_visits} visits "
              f"({res.skipped} resumed), F1={f1:.4f} -> {res.directory}")
    return EXIT_OK


def collect_reports(root: Path, seeds: Sequence[int] | None = None, averaging: str = "macro") -> list[MetricReport]:
    grouped: dict[tuple[str, str], dict[int, list[dict]]] = defaultdict(dict)
    for path in find_manifests(root):
        method, backbone, seed = path.parts[-4], path.parts[-3], path.parts[-2]
        try:
            seed_value = int(seed)
        except ValueError:
            continue
        grouped[(method, backbone)][seed_value] = read_manifest(path)
    reports = []
    for (method, backbone), per_seed_rows in sorted(grouped.items()):
        per_seed, n, degenerate = {}, 0, 0
        for seed, rows in per_seed_rows.items():
            score, n, deg = score_manifest_rows(rows, averaging)
            per_seed[seed] = score
            degenerate += deg
        wanted = list(seeds) if seeds else sorted(per_seed)
        reports.append(aggregate(per_seed, wanted, method, backbone, n, degenerate, averaging))
    return reports


def significance_table(reports: Sequence[MetricReport], ours: str) -> dict[str, list[SignificanceResult]]:
    out: dict[str, list[SignificanceResult]] = {}
    for mine in (r for r in reports if r.method == ours):
        results = []
        for other in reports:
            if other.backbone != mine.backbone or other.method == ours:
                continue
            seeds = [s for s in mine.seeds if s in other.per_seed]
            if len(seeds) < 2:
                continue
            for m in METRICS:
                results.append(paired_t_test([mine.per_seed[s][m] for s in seeds],
                                             [other.per_seed[s][m] for s in seeds], other.method, m))
        out[f"{ours}/{mine.backbone}"] = results
    return out


def precision_curves(cfg: RunConfig, root: Path, ks: Sequence[int] = tuple(range(1, 8))) -> list[PrecisionAtK]:
    """Full-history (bigram-Jaccard, whole prescriptions) vs focus-filtered (newly added drugs).

    Both curves use the visits on which PACE extracted at least one focus.
    """
    paths = [p for p in find_manifests(root) if p.parts[-4] == "pace"]
    if not paths:
        return []
    rows = [r for r in read_manifest(paths[0]) if r.get("focuses")]
    inputs = load_inputs(cfg)
    candidates = treatrag_candidates(inputs.pool)
    by_key = {}
    for record in inputs.test:
        for v in record.visits:
            by_key[f"{record.patient_id}:{v.visit_index}"] = v
    full, focused = [], []
    for r in rows:
        visit = by_key.get(r["key"])
        if visit is None:
            continue
        gold = r["gold"]
        ranked = rank_treatrag(candidates, treatrag_query(visit), k=max(ks), adaptive=False)
        full.append(([c.entry.associated_drugs for c in ranked], gold))
        groups = [[DrugSet.of(c["associated_drugs"]) - DrugSet.of(c["prior_drugs"]) for c in t["retrieved"]]
                  for t in r.get("tendencies", [])]
        focused.append((groups, gold))
    full_curve = precision_at_k_curve("full-history", full, ks)
    values = []
    for k in ks:
        per_visit = []
        for groups, gold in focused:
            union = [d for g in groups for d in g[:k]]
            per_visit.append(drug_precision_at_k([set().union(*union)] if union else [], gold, 1))
        values.append(sum(per_visit) / len(per_visit) if per_visit else 0.0)
    return [full_curve, PrecisionAtK("focus-filtered", list(ks), values, len(focused))]


def cmd_eval(args: argparse.Namespace) -> int:
    root = Path(args.runs)
    if not find_manifests(root):
        raise DataError(f"no manifests under {root}")
    cfg = load_config(args.config) if args.config else None
    seeds = cfg.run.seeds if cfg is not None and not args.any_seeds else None
    averaging = args.averaging or (cfg.run.averaging if cfg else "macro")
    reports = collect_reports(root, seeds, averaging)
    sig = significance_table(reports, args.ours)
    curves = precision_curves(cfg, root) if cfg is not None and cfg.paths.cohort else []
    divergence = {}
    for path in find_manifests(root):
        if path.parts[-4] == "pace":
            rows = read_manifest(path)
            refined = [r for r in rows if any(c["stage"] == "refine" for c in r["trace"]["calls"])]
            diverged = sum(1 for r in refined if r["refinement"]["divergence"]["diverged"])
            divergence[f"{path.parts[-3]}/{path.parts[-2]}"] = {
                "refined_visits": len(refined), "diverged": diverged,
                "rate": diverged / len(refined) if refined else 0.0}
    out = Path(args.out) if args.out else root
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(out / "report.json", reports, sig, curves, {"stage3_divergence": divergence})
    write_report_csv(out / "report.csv", reports, sig)
    if curves:
        write_precision_csv(out / "precision_at_k.csv", curves)
    for r in reports:
        cells = "  ".join(f"{m}={r.mean[m]:.4f}±{r.std[m]:.4f}" for m in METRICS)
        print(f"{r.method:<11} {r.backbone:<10} n={r.n_visits:<4} {cells}")
    for name, results in sig.items():
        for s in results:
            if s.metric == "f1":
                print(f"{name} vs {s.baseline}: t={s.t:.3f} p={s.p:.4g} {s.stars}{' ' + s.degenerate if s.degenerate else ''}")
    for c in curves:
        print(f"precision@k {c.method}: " + " ".join(f"{k}:{p:.3f}" for k, p in zip(c.ks, c.precision)))
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    spec = SweepSpec.parse(args.axis, args.values)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} already holds results; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True)
    rows = []
    for value in spec.values:
        vcfg = spec.apply(cfg, value)
        root = out / spec.label(value)
        run_all_seeds(vcfg, root)
        for r in collect_reports(root, vcfg.run.seeds, vcfg.run.averaging):
            rows.append([spec.axis, value, r.method, r.backbone] +
                        [f"{r.mean[m]:.6f}" for m in METRICS] + [f"{r.std['f1']:.6f}"])
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "method", "backbone", *METRICS, "f1_std"])
        w.writerows(rows)
    for row in rows:
        print(f"{row[0]}={row[1]:g} {row[2]}: F1={row[4]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay / judge


def cmd_replay(args: argparse.Namespace) -> int:
    manifest = Path(args.manifest)
    rows = read_manifest(manifest)
    recorded = ReplayBackend.from_manifest(manifest)
    if args.key:
        row = next((r for r in rows if r["key"] == args.key), None)
        if row is None:
            raise DataError(f"visit {args.key!r} not in {manifest}")
        calls = [c for c in row["trace"]["calls"] if not args.stage or c["stage"] == args.stage]
        if not calls:
            raise DataError(f"no traced call for stage {args.stage!r}")
        cfg = load_config(args.config or manifest.parent / EFFECTIVE_CONFIG)
        backend = make_backend(cfg) if args.live else recorded
        params = cfg.generation_params(row["seed"])
        for call in calls:
            print(f"--- {call['stage']} ---")
            print(replay_call(call, backend, params))
        return EXIT_OK
    cfg = load_config(args.config or manifest.parent / EFFECTIVE_CONFIG)
    inputs = load_inputs(cfg)
    indexes = build_indexes(cfg, inputs)
    seed = rows[0]["seed"] if rows else cfg.run.seeds[0]
    rt = build_runtime(cfg, seed, inputs, indexes, recorded)
    wanted = {r["key"]: r for r in rows}
    mismatched = 0
    for ctx in targets(cfg, inputs):
        if ctx.key not in wanted:
            continue
        row, _ = visit_row(cfg.run.method, rt, ctx, seed)
        if json.dumps(row, sort_keys=True) != json.dumps(wanted[ctx.key], sort_keys=True):
            mismatched += 1
            log.warning("replay of %s differs from the manifest", ctx.key)
    print(f"replayed {len(wanted)} visits offline; {mismatched} differ")
    return EXIT_OK if mismatched == 0 else EXIT_DATA


def cmd_judge(args: argparse.Namespace) -> int:
    cfg = config_from_args(args)
    rows = read_manifest(args.manifest)
    inputs = load_inputs(cfg)
    visits = {}
    for record in inputs.cohort:
        for pos, v in enumerate(record.visits):
            visits[f"{record.patient_id}:{v.visit_index}"] = (record, pos)
    backend = make_backend(cfg)
    params = GenerationParams(temperature=0.0, max_tokens=cfg.generation.max_tokens,
                              context_window=cfg.generation.context_window, seed=cfg.run.seeds[0])
    verdicts = {}
    for row in rows[: args.limit or None]:
        if row["key"] not in visits:
            raise DataError(f"visit {row['key']} is not in the configured cohort")
        record, pos = visits[row["key"]]
        case = JudgeCase(row["key"], note_text(record.visits[pos].input_view()),
                         history_slot(build_history_window(record, pos)), tuple(row["gold"]),
                         tuple(f["text"] for f in row.get("focuses", [])))
        verdicts[row["key"]] = judge_keyword_relevance(backend, case, cfg.run.flavor, params, cfg.backend.max_attempts)
    summary = summarize_judgements(verdicts)
    out = Path(args.out) if args.out else Path(args.manifest).parent / "judge.json"
    out.write_text(json.dumps({"n": summary.n, "mean": summary.mean, "sd": summary.sd, "scores": summary.scores},
                              indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"judged {summary.n} visits: mean={summary.mean:.2f} sd={summary.sd:.2f} -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pacerag", description="Patient-aware prescription recommendation runs.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort, guideline text, script table and run config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--synth-config", help="JSON synthesis config (default: built-in Parkinson's lexicon)")
    p.add_argument("--n-patients", type=int)
    p.add_argument("--flavor", choices=("soap", "diagnosis"))
    p.add_argument("--noise", type=float, default=0.1, help="scripted distractor rate at temperature 1")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse SOAP notes or MIMIC-IV tables into a cohort file")
    p.add_argument("--source", required=True)
    p.add_argument("--flavor", choices=("soap", "diagnosis"), default="soap")
    p.add_argument("--mapping", help="NDC to ATC mapping table (two columns, TSV or CSV) for the diagnosis flavor")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("index", help="build and persist a retrieval index")
    _add_run_flags(p)
    p.add_argument("--kind", choices=("dense", "sparse", "guideline"), default="dense")
    p.add_argument("--out")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("run", help="run a method over the test split for every configured seed")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score manifests and write metric, significance and precision@k reports")
    p.add_argument("--runs", required=True, help="runs root directory")
    p.add_argument("--config", help="run config; enables seed checking and precision@k")
    p.add_argument("--ours", default="pace")
    p.add_argument("--averaging", choices=("macro", "micro"))
    p.add_argument("--any-seeds", action="store_true", help="aggregate whatever seeds are present")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run and evaluate over a list of k or tau values")
    _add_run_flags(p)
    p.add_argument("--axis", choices=("k", "tau"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("replay", help="re-execute traced model calls without network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="defaults to the effective config beside the manifest")
    p.add_argument("--key", help="visit key (patient:index) to replay")
    p.add_argument("--stage", help="only this stage of the visit")
    p.add_argument("--live", action="store_true", help="send the traced messages to the configured backend")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("judge", help="score focus keywords with the judge prompt")
    _add_run_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_judge)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, InvalidSynthConfig) as exc:
        print(f"pacerag: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, BackendError) as exc:
        print(f"pacerag: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, CohortError, RetrievalError, PoolLeakage, PipelineError, EvalError, RunLocked,
            OSError, json.JSONDecodeError) as exc:
        print(f"pacerag: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
