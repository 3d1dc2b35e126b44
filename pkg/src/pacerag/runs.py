"""Run directories, manifests and the per-visit dispatcher.

Layout::

    <runs_dir>/<method>/<backbone>/<seed>/
        manifest.jsonl         one JSON object per visit, sorted keys
        effective_config.ini   the configuration that produced it
        metrics.json           scores for this seed
        timings.jsonl          wall-clock per stage (kept apart so manifests stay byte-stable)
        .lock                  present while a process owns the directory
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

from pacerag.cohort import Cohort, DrugSet, read_cohort, split_cohort
from pacerag.config import RunConfig
from pacerag.evaluation import EmptyGold, score_manifest_rows
from pacerag.llm import Backend, BackendError, HttpBackend, MaxRetriesExceeded, ReplayBackend
from pacerag.pipeline import (
    PipelineError,
    PoolLeakage,
    Runtime,
    StageError,
    Trace,
    VisitContext,
    iter_targets,
    run_guideline_rag,
    run_medreflect,
    run_pace,
    run_treatrag,
    run_zero_shot,
    treatrag_candidates,
)
from pacerag.retrieval import (
    DenseIndex,
    build_pool_entries,
    chunk_guidelines,
    guideline_entries,
    make_embedder,
)
from pacerag.scripted import ScriptedBackend

log = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
EFFECTIVE_CONFIG = "effective_config.ini"
METRICS = "metrics.json"
TIMINGS = "timings.jsonl"
LOCK = ".lock"


class RunLocked(RuntimeError):
    pass


class DataError(RuntimeError):
    """Inputs are missing, malformed or inconsistent (exit code 3)."""


@contextmanager
def run_lock(directory: str | Path) -> Iterator[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / LOCK
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{d} is locked by another process (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


def run_dir(cfg: RunConfig, seed: int, root: str | Path | None = None) -> Path:
    base = Path(root) if root is not None else cfg.resolve(cfg.paths.runs_dir)
    return base / cfg.run.method / cfg.backbone / str(seed)


# ---------------------------------------------------------------------------
# Inputs


@dataclass
class RunInputs:
    cohort: Cohort
    pool: Cohort
    test: Cohort
    guidelines: str = ""


def load_inputs(cfg: RunConfig) -> RunInputs:
    if not cfg.paths.cohort:
        raise DataError("config [paths] cohort is not set")
    path = cfg.resolve(cfg.paths.cohort)
    try:
        cohort = read_cohort(path)
    except FileNotFoundError:
        raise DataError(f"cohort file not found: {path}") from None
    flavors = {v.flavor for p in cohort for v in p.visits}
    if flavors and flavors != {cfg.run.flavor}:
        raise DataError(f"cohort flavor {sorted(flavors)} does not match run flavor {cfg.run.flavor!r}")
    pool, test = split_cohort(cohort, cfg.split_spec())
    return RunInputs(cohort, pool, test, load_guidelines(cfg))


def load_guidelines(cfg: RunConfig) -> str:
    if not cfg.paths.guidelines:
        return ""
    path = cfg.resolve(cfg.paths.guidelines)
    if path.is_dir():
        return "\n\n".join(p.read_text(encoding="utf-8") for p in sorted(path.glob("*.txt")))
    if not path.exists():
        raise DataError(f"guideline file not found: {path}")
    return path.read_text(encoding="utf-8")


@dataclass
class Indexes:
    pool: DenseIndex | None
    guidelines: DenseIndex | None


def build_indexes(cfg: RunConfig, inputs: RunInputs, methods: Sequence[str] | None = None) -> Indexes:
    methods = list(methods or [cfg.run.method])
    r = cfg.retrieval
    embedder = make_embedder(r.embedder)
    pool_index = None
    if "pace" in methods:
        saved = cfg.resolve(cfg.paths.index_dir) / "dense" if cfg.paths.index_dir else None
        if saved is not None and (saved / "manifest.json").exists():
            pool_index = DenseIndex.load(saved, embedder)
        else:
            pool_index = DenseIndex.build(build_pool_entries(inputs.pool, r.scope, r.segmentation), embedder)
        test_ids = set(inputs.test.patient_ids)
        leaked = sorted({e.patient_id for e in pool_index.entries} & test_ids)
        if leaked:
            raise PoolLeakage(f"pool index contains test patients {leaked[:5]}")
    guideline_index = None
    if inputs.guidelines and ("guideline" in methods or cfg.run.refine_with_guidelines):
        chunks = chunk_guidelines(inputs.guidelines, r.chunk_size, r.chunk_overlap)
        guideline_index = DenseIndex.build(guideline_entries(chunks), embedder)
    return Indexes(pool_index, guideline_index)


def make_backend(cfg: RunConfig) -> Backend:
    d = cfg.backend_descriptor()
    if d.kind == "scripted":
        return ScriptedBackend.from_file(d.script_table)
    if d.kind == "replay":
        return ReplayBackend.from_manifest(d.script_table)
    return HttpBackend(d.endpoint_url, d.model_name, d.api_key, d.timeout, d.retries, d.parallelism)


def build_runtime(cfg: RunConfig, seed: int, inputs: RunInputs, indexes: Indexes, backend: Backend) -> Runtime:
    return Runtime(
        backend=backend,
        config=cfg.pipeline_config(seed),
        pool_index=indexes.pool,
        guideline_index=indexes.guidelines,
        treatrag_cases=treatrag_candidates(inputs.pool) if cfg.run.method == "treatrag" else (),
        test_ids=frozenset(inputs.test.patient_ids),
        vocabulary=frozenset(inputs.cohort.drug_vocabulary()),
    )


def targets(cfg: RunConfig, inputs: RunInputs) -> list[VisitContext]:
    contexts = iter_targets(inputs.test, cfg.run.min_visit_index)
    return contexts[: cfg.run.limit] if cfg.run.limit else contexts


# ---------------------------------------------------------------------------
# One visit


def visit_row(method: str, rt: Runtime, ctx: VisitContext, seed: int) -> tuple[dict, dict]:
    """Manifest row and timing record for one visit."""
    trace = Trace(rt.backend)
    t0 = time.perf_counter()
    row: dict = {
        "key": ctx.key,
        "patient_id": ctx.patient_id,
        "visit_index": ctx.visit.visit_index,
        "method": method,
        "seed": seed,
        "gold": ctx.gold.sorted(),
        "active_history": ctx.active_history.sorted(),
    }
    try:
        if method == "pace":
            out = run_pace(rt, ctx, trace)
            prediction = out.prediction
            row.update(out.to_record())
            row["degenerate_empty"] = out.refinement.degenerate_empty
        elif method == "zero_shot":
            prediction = run_zero_shot(rt, ctx, trace)
        elif method == "guideline":
            prediction, chunks = run_guideline_rag(rt, ctx, trace)
            row["guideline_chunks"] = chunks
        elif method == "treatrag":
            prediction, cases = run_treatrag(rt, ctx, trace)
            row["retrieved"] = [c.to_dict() for c in cases]
        elif method == "medreflect":
            prediction, draft = run_medreflect(rt, ctx, trace)
            row["initial_draft"] = draft
        else:
            raise PipelineError(f"unknown method {method!r}")
    except MaxRetriesExceeded as exc:
        # The visit is scored as an empty prediction and the failure is kept.
        trace.error(getattr(exc, "stage", ""), exc)
        prediction = DrugSet()
        row["failed"] = True
    row.setdefault("degenerate_empty", False)
    row["prediction"] = DrugSet(prediction).sorted()
    row["trace"] = trace.to_dict()
    timing = {"key": ctx.key, "wall": time.perf_counter() - t0, "stages": trace.timings}
    return row, timing


# ---------------------------------------------------------------------------
# Manifests


def dump_row(row: dict) -> str:
    return json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n"


def repair_manifest(path: str | Path) -> list[dict]:
    """Read a manifest, truncating a partially written last line."""
    path = Path(path)
    if not path.exists():
        return []
    rows: list[dict] = []
    good = 0
    with open(path, "rb") as fh:
        data = fh.read()
    for line in data.splitlines(keepends=True):
        if not line.endswith(b"\n"):
            break
        try:
            rows.append(json.loads(line))
        except ValueError:
            break
        good += len(line)
    if good != len(data):
        log.warning("%s: dropping %d bytes of partial output", path, len(data) - good)
        with open(path, "r+b") as fh:
            fh.truncate(good)
    return rows


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except ValueError:
                    raise DataError(f"{path}:{n}: malformed manifest line") from None
    return rows


@dataclass
class SeedResult:
    directory: Path
    n_visits: int
    skipped: int
    metrics: dict


def seed_metrics(rows: Sequence[dict], method: str, backbone: str, seed: int, averaging: str = "macro") -> dict:
    try:
        score, n, degenerate = score_manifest_rows(rows, averaging)
        scores = score.as_dict()
    except EmptyGold as exc:
        raise DataError(f"manifest has a visit with empty gold: {exc}") from None
    except ValueError:
        scores, n, degenerate = {}, 0, 0
    out = {"method": method, "backbone": backbone, "seed": seed, "n_visits": n, "averaging": averaging,
           "degenerate_empty_count": degenerate, "failed_visits": sum(1 for r in rows if r.get("failed")),
           "repairs": sum(r.get("trace", {}).get("repairs", 0) for r in rows), "scores": scores}
    if method == "pace" and rows:
        diverged = sum(1 for r in rows if r.get("refinement", {}).get("divergence", {}).get("diverged"))
        refined = sum(1 for r in rows if any(c["stage"] == "refine" for c in r.get("trace", {}).get("calls", [])))
        out["stage3_divergence"] = {"diverged": diverged, "refined_visits": refined,
                                    "rate": diverged / refined if refined else 0.0}
    return out


def run_seed(cfg: RunConfig, seed: int, inputs: RunInputs, indexes: Indexes, backend: Backend,
             root: str | Path | None = None, contexts: Sequence[VisitContext] | None = None) -> SeedResult:
    """Run one (method, seed), resuming from any rows already in the manifest."""
    out = run_dir(cfg, seed, root)
    with run_lock(out):
        cfg.with_seeds([seed]).absolute_paths().write(out / EFFECTIVE_CONFIG)
        manifest = out / MANIFEST
        done = {r["key"] for r in repair_manifest(manifest)}
        contexts = list(contexts if contexts is not None else targets(cfg, inputs))
        pending = [c for c in contexts if c.key not in done]
        rt = build_runtime(cfg, seed, inputs, indexes, backend)
        method = cfg.run.method
        with open(manifest, "a", encoding="utf-8", newline="\n") as mf, \
                open(out / TIMINGS, "a", encoding="utf-8", newline="\n") as tf, \
                ThreadPoolExecutor(max_workers=cfg.backend.parallelism) as pool:
            futures = [pool.submit(visit_row, method, rt, ctx, seed) for ctx in pending]
            try:
                for fut in futures:
                    row, timing = fut.result()
                    mf.write(dump_row(row))
                    mf.flush()
                    tf.write(json.dumps(timing, sort_keys=True) + "\n")
            except BaseException:
                for f in futures:
                    f.cancel()
                raise
        rows = read_manifest(manifest)
        metrics = seed_metrics(rows, method, cfg.backbone, seed, cfg.run.averaging)
        (out / METRICS).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return SeedResult(out, len(rows), len(done), metrics)


def run_all_seeds(cfg: RunConfig, root: str | Path | None = None) -> list[SeedResult]:
    inputs = load_inputs(cfg)
    indexes = build_indexes(cfg, inputs)
    backend = make_backend(cfg)
    contexts = targets(cfg, inputs)
    return [run_seed(cfg, s, inputs, indexes, backend, root, contexts) for s in cfg.run.seeds]


def find_manifests(root: str | Path) -> list[Path]:
    return sorted(Path(root).glob(f"*/*/*/{MANIFEST}"))


__all__ = [
    "BackendError", "DataError", "RunLocked", "StageError", "build_indexes", "build_runtime", "find_manifests",
    "load_inputs", "make_backend", "read_manifest", "repair_manifest", "run_all_seeds", "run_dir", "run_seed",
    "seed_metrics", "targets", "visit_row",
]
