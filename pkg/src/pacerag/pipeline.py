"""PACE-RAG stages and the baseline methods.

Every model call goes through :func:`_call`, which renders the template for
the run's flavor, applies the retry-with-reminder loop and records each raw
exchange in the visit trace. The Stage-3 drug filter is re-derived by
:func:`audit_refinement`; the model's own Stage-3 answer is kept only to
measure how often it disagrees.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from pacerag.cohort import (
    Admission,
    Cohort,
    CohortError,
    DrugSet,
    SoapNote,
    Visit,
    active_medications,
    build_history_window,
    canonicalize_drug,
    ordered_unique,
)
from pacerag.llm import (
    Backend,
    BackendError,
    ChatMessage,
    CompletionResult,
    GenerationParams,
    MaxRetriesExceeded,
    complete_with_repair,
    messages_digest,
)
from pacerag.prompts import (
    EMPTY_SLOT,
    ParsedRefinement,
    EmptyBlock,
    WrongShape,
    all_templates,
    get_template,
    parse_answer_list,
    parse_keywords_json,
    parse_refinement_json,
    parse_start_end_block,
    parse_tag,
    parse_tendency_json,
    render,
    summary_sections,
    validate_focus_substrings,
)
from pacerag.retrieval import (
    DenseIndex,
    IndexEntry,
    RetrievalParams,
    RetrievedCase,
    adaptive_filter,
    dense_retrieve,
    jaccard_bigram_similarity,
)

log = logging.getLogger(__name__)

METHODS = ("pace", "zero_shot", "guideline", "treatrag", "medreflect")


class PipelineError(Exception):
    pass


class StageError(PipelineError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class PoolLeakage(PipelineError):
    """A retrieved case belongs to a test-split patient."""


# ---------------------------------------------------------------------------
# Data carried through a visit


@dataclass(frozen=True)
class VisitContext:
    patient_id: str
    visit: Visit
    history: tuple[Visit, ...]
    gold: DrugSet

    @property
    def key(self) -> str:
        return f"{self.patient_id}:{self.visit.visit_index}"

    @property
    def flavor(self) -> str:
        return self.visit.flavor

    @property
    def active_history(self) -> DrugSet:
        return active_medications(self.history)


def iter_targets(test: Cohort, min_visit_index: int = 1) -> list[VisitContext]:
    """Prediction targets: every test visit at position ``>= min_visit_index``."""
    out = []
    for record in test:
        for pos in range(min_visit_index, len(record.visits)):
            visit = record.visits[pos]
            out.append(VisitContext(record.patient_id, visit.input_view(),
                                    tuple(build_history_window(record, pos)), visit.ground_truth))
    return out


@dataclass(frozen=True)
class FocusQuery:
    text: str
    source_field: str


@dataclass(frozen=True)
class TendencySignal:
    focus: FocusQuery
    dominant_pattern: str
    common_additions: DrugSet
    reasoning: str
    retrieved: tuple[RetrievedCase, ...] = ()

    @property
    def ordered_additions(self) -> list[str]:
        return sorted(self.common_additions)

    def to_dict(self, with_cases: bool = True) -> dict:
        d = {
            "focus": self.focus.text,
            "source_field": self.focus.source_field,
            "dominant_pattern": self.dominant_pattern,
            "common_additions": self.ordered_additions,
            "reasoning": self.reasoning,
        }
        if with_cases:
            d["retrieved"] = [c.to_dict() for c in self.retrieved]
        return d


@dataclass(frozen=True)
class AuditEntry:
    action: str
    drug: str
    justification: str = ""

    def to_dict(self) -> dict:
        return {"action": self.action, "drug": self.drug, "justification": self.justification}


@dataclass(frozen=True)
class RefinementResult:
    final_prescription: DrugSet
    audit_log: tuple[AuditEntry, ...]
    description: str = ""
    degenerate_empty: bool = False
    diverged: bool = False
    llm_only: tuple[str, ...] = ()
    audit_only: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "final_prescription": self.final_prescription.sorted(),
            "audit_log": [e.to_dict() for e in self.audit_log],
            "description": self.description,
            "degenerate_empty": self.degenerate_empty,
            "divergence": {"diverged": self.diverged, "llm_only": list(self.llm_only),
                           "audit_only": list(self.audit_only)},
        }


@dataclass
class PipelineConfig:
    flavor: str = "soap"
    params: GenerationParams = field(default_factory=GenerationParams)
    retrieval: RetrievalParams = field(default_factory=RetrievalParams)
    guideline_retrieval: RetrievalParams = field(default_factory=lambda: RetrievalParams(3, 0.3))
    focus_cap: int = 2
    max_attempts: int = 3
    with_summary: bool = True
    # Ablation switch: append guideline chunks after the tendencies in Stage 3.
    refine_with_guidelines: bool = False


@dataclass
class Runtime:
    backend: Backend
    config: PipelineConfig
    pool_index: DenseIndex | None = None
    guideline_index: DenseIndex | None = None
    treatrag_cases: Sequence[IndexEntry] = ()
    test_ids: frozenset[str] = frozenset()
    vocabulary: frozenset[str] = frozenset()


# ---------------------------------------------------------------------------
# Tracing


class Trace:
    """Per-visit log of model exchanges, parse failures and timings."""

    def __init__(self, backend: Backend):
        self._backend = backend
        self.calls: list[dict] = []
        self.errors: list[dict] = []
        self.timings: dict[str, float] = {}
        self.repairs = 0

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams, stage: str = "") -> CompletionResult:
        t0 = time.perf_counter()
        res = self._backend.complete(messages, params, stage=stage)
        self.timings[stage] = self.timings.get(stage, 0.0) + time.perf_counter() - t0
        # The system prompt is stored by hash; it is recovered from the template registry on replay.
        self.calls.append({"stage": stage, "digest": messages_digest(messages), "output": res.text,
                           "system_sha256": _sha(messages[0].content),
                           "messages": [m.to_dict() for m in messages[1:]]})
        return res

    def error(self, stage: str, exc: Exception) -> None:
        self.errors.append({"stage": stage, "error": type(exc).__name__, "message": str(exc)})

    def to_dict(self) -> dict:
        return {"calls": self.calls, "errors": self.errors, "repairs": self.repairs}


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def call_messages(call: dict) -> list[ChatMessage]:
    """Rebuild the exact message list of a traced call."""
    for tmpl in all_templates():
        if tmpl.stage_id == call["stage"] and _sha(tmpl.system_text) == call["system_sha256"]:
            system = tmpl.system_text
            break
    else:
        raise PipelineError(f"no template matches the traced {call['stage']!r} system prompt")
    messages = [ChatMessage("system", system)] + [ChatMessage(m["role"], m["content"]) for m in call["messages"]]
    if messages_digest(messages) != call["digest"]:
        raise PipelineError("traced messages do not match their digest")
    return messages


def replay_call(call: dict, backend: Backend, params: GenerationParams) -> str:
    """Re-execute one traced model call against ``backend``."""
    return backend.complete(call_messages(call), params, stage=call["stage"]).text


def _call(rt: Runtime, trace: Trace, stage: str, bindings: dict, validator):
    template = get_template(stage, rt.config.flavor)
    messages = render(template, bindings)
    try:
        outcome = complete_with_repair(trace, messages, rt.config.params, validator, stage=stage,
                                       max_attempts=rt.config.max_attempts)
    except MaxRetriesExceeded as exc:
        trace.repairs += rt.config.max_attempts - 1
        exc.stage = stage
        raise
    except BackendError as exc:
        raise StageError(stage, exc) from exc
    trace.repairs += outcome.result.attempts_used - 1
    return outcome.value


# ---------------------------------------------------------------------------
# Slot rendering


def drug_slot(drugs: Iterable[str]) -> str:
    items = list(drugs)
    return json.dumps(items, ensure_ascii=False) if items else EMPTY_SLOT


def _ordinal(n: int) -> str:
    suffix = "th" if 10 <= n % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(n % 10, "th")
    return f"{n}{suffix}"


def visit_block(visit: Visit) -> str:
    head = f"{_ordinal(visit.visit_index + 1)} Visit)"
    note = visit.note
    if isinstance(note, SoapNote):
        plan = note.plan or ", ".join(visit.ground_truth.sorted())
        return "\n".join([head, f"Subjective: {note.subjective or EMPTY_SLOT}",
                          f"Objective: {note.objective or EMPTY_SLOT}",
                          f"Assessment: {note.assessment or EMPTY_SLOT}", f"Plan: {plan or EMPTY_SLOT}"])
    return "\n".join([head, f"Diagnoses: {diagnoses_text(note)}",
                      f"Prescriptions: {', '.join(visit.ground_truth.sorted()) or EMPTY_SLOT}"])


def history_slot(history: Sequence[Visit]) -> str:
    return "\n".join(visit_block(v) for v in history) if history else EMPTY_SLOT


def diagnoses_text(note: Admission) -> str:
    return "; ".join(d.strip() for d in note.diagnoses)


def note_text(visit: Visit) -> str:
    note = visit.note
    if isinstance(note, SoapNote):
        return (f"Subjective: {note.subjective or EMPTY_SLOT}\nObjective: {note.objective or EMPTY_SLOT}\n"
                f"Assessment: {note.assessment or EMPTY_SLOT}")
    return diagnoses_text(note)


def _note_bindings(ctx: VisitContext) -> dict:
    note = ctx.visit.note
    if isinstance(note, SoapNote):
        return {"subjective": note.subjective, "objective": note.objective, "assessment": note.assessment}
    return {"diagnoses": diagnoses_text(note)}


def case_block(i: int, case: RetrievedCase) -> str:
    e = case.entry
    label = {"subjective": "Subjective", "assessment": "Assessment"}.get(e.field_tag, "Diagnoses")
    lines = [
        f"Case {i} (similarity {case.score:.3f})",
        f"Matched {label}: {e.text}",
        f"Previous prescription: {drug_slot(e.prior_drugs.sorted())}",
        f"Prescribed at this visit: {drug_slot(e.associated_drugs.sorted())}",
    ]
    if e.context:
        lines.append(f"Visit note: {e.context}")
    return "\n".join(lines)


def cases_slot(cases: Sequence[RetrievedCase]) -> str:
    return "\n" + "\n\n".join(case_block(i, c) for i, c in enumerate(cases, 1)) if cases else EMPTY_SLOT


def tendencies_slot(signals: Sequence[TendencySignal]) -> str:
    return json.dumps([t.to_dict(with_cases=False) for t in signals], ensure_ascii=False) if signals else EMPTY_SLOT


def _canon(labels: Iterable[str]) -> list[str]:
    out = []
    for label in labels:
        try:
            out.append(canonicalize_drug(label))
        except CohortError:
            continue
    return ordered_unique(out)


# ---------------------------------------------------------------------------
# Stage 0: initial draft (also the zero-shot baseline)


def _draft_validator(text: str) -> list[str]:
    drugs = _canon(parse_start_end_block(text).drugs)
    if not drugs:
        raise EmptyBlock("draft names no usable drug")
    return drugs


def _draft_bindings(ctx: VisitContext) -> dict:
    b = _note_bindings(ctx)
    slot = drug_slot(ctx.active_history.sorted())
    b["history" if ctx.flavor == "soap" else "medications"] = slot
    b["recent_visit_history_text"] = history_slot(ctx.history)
    return b


def generate_initial_draft(rt: Runtime, ctx: VisitContext, trace: Trace) -> list[str]:
    """Ordered canonical drug labels of the Stage-0 draft."""
    return _call(rt, trace, "initial", _draft_bindings(ctx), _draft_validator)


# ---------------------------------------------------------------------------
# Stage 1: focus queries


def _focus_source(ctx: VisitContext) -> list[tuple[str, str]]:
    note = ctx.visit.note
    if isinstance(note, SoapNote):
        return [("subjective", note.subjective), ("assessment", note.assessment)]
    return [("diagnosis-list", diagnoses_text(note))]


def assign_focus_fields(keywords: Iterable[str], ctx: VisitContext, cap: int) -> list[FocusQuery]:
    """Attach a source field to each validated keyword; others are dropped."""
    out: list[FocusQuery] = []
    for kw in keywords:
        for tag, text in _focus_source(ctx):
            if validate_focus_substrings([kw], text):
                out.append(FocusQuery(kw, tag))
                break
    return out[:cap]


def extract_focus_queries(rt: Runtime, ctx: VisitContext, trace: Trace) -> list[FocusQuery]:
    cap = rt.config.focus_cap
    bindings = {"text": note_text(ctx.visit), "active_history": drug_slot(ctx.active_history.sorted())}
    try:
        parsed = _call(rt, trace, "focus", bindings, lambda t: parse_keywords_json(t, cap))
    except MaxRetriesExceeded as exc:
        log.warning("%s: focus extraction unparseable, treating as no focus", ctx.key)
        trace.error("focus", exc)
        return []
    valid = validate_focus_substrings(parsed.keywords, note_text(ctx.visit))
    return assign_focus_fields(valid, ctx, cap)


# ---------------------------------------------------------------------------
# Retrieval and Stage 2


def retrieve_similar(rt: Runtime, focus: FocusQuery) -> list[RetrievedCase]:
    index = rt.pool_index
    if index is None:
        raise PipelineError("no retrieval pool index configured")
    params = rt.config.retrieval
    wide = RetrievalParams(max(len(index), 1), params.tau)
    hits = dense_retrieve(index, focus.text, wide, field_tags=[focus.source_field])
    seen: set[tuple[str, int]] = set()
    cases: list[RetrievedCase] = []
    for h in hits:
        if h.entry.patient_id in rt.test_ids:
            raise PoolLeakage(f"retrieved case from test patient {h.entry.patient_id!r}")
        if h.entry.case_key in seen:
            continue
        seen.add(h.entry.case_key)
        cases.append(h)
        if len(cases) == params.k:
            break
    return cases


def analyze_tendency(rt: Runtime, ctx: VisitContext, focus: FocusQuery, cases: Sequence[RetrievedCase],
                     trace: Trace) -> TendencySignal:
    if not cases:
        return TendencySignal(focus, "NONE", DrugSet(), "No similar case passed the similarity threshold.", ())
    if ctx.flavor == "soap":
        bindings = {"symptoms": ctx.visit.note.subjective, "focus_txt": focus.text, "rag_cases": cases_slot(cases)}
    else:
        bindings = {"diagnoses": diagnoses_text(ctx.visit.note), "focus_txt": focus.text,
                    "rag_patients": cases_slot(cases)}
    try:
        parsed = _call(rt, trace, "tendency", bindings, parse_tendency_json)
    except MaxRetriesExceeded as exc:
        log.warning("%s: tendency output unparseable for %r; using empty signal", ctx.key, focus.text)
        trace.error("tendency", exc)
        return TendencySignal(focus, "NONE", DrugSet(), "Unparseable analysis output.", tuple(cases))
    supported: set[str] = set()
    for c in cases:
        supported |= c.entry.associated_drugs
    additions = DrugSet(d for d in _canon(parsed.common_additions) if d in supported)
    return TendencySignal(focus, parsed.dominant_pattern, additions, parsed.reasoning, tuple(cases))


# ---------------------------------------------------------------------------
# Stage 3


def ordered_additions(signals: Sequence[TendencySignal]) -> list[str]:
    """Union of common additions: focus order first, then lexicographic."""
    return ordered_unique(d for t in signals for d in t.ordered_additions)


def refine_prescription_llm(rt: Runtime, ctx: VisitContext, signals: Sequence[TendencySignal],
                            draft: Sequence[str], trace: Trace) -> ParsedRefinement:
    tendency_text = tendencies_slot(signals)
    if rt.config.refine_with_guidelines and rt.guideline_index is not None:
        chunks = _guideline_hits(rt, ctx)
        if chunks:
            tendency_text += "\nSimilar Guidelines:\n" + "\n---\n".join(chunks)
    b = _note_bindings(ctx)
    b.update({
        "active_history": drug_slot(ctx.active_history.sorted()),
        "initial_prescription": drug_slot(draft),
        "rag_focus_tendency": tendency_text,
        "recent_visit_history_text": history_slot(ctx.history),
    })
    if ctx.flavor == "soap":
        primary = signals[0].focus.text if signals else EMPTY_SLOT
        b["primary_focus_block"] = f"Primary Focus: {primary}"
    return _call(rt, trace, "refine", b, parse_refinement_json)


def audit_refinement(active_history: DrugSet, draft: Iterable[str], signals: Sequence[TendencySignal],
                     proposed: ParsedRefinement | None = None) -> RefinementResult:
    """Deterministic Stage-3 filter.

    ``final = history ∪ (draft ∩ A) ∪ (proposed ADDED ∩ A)`` where ``A`` is
    the union of common additions. History drugs are logged KEPT; other
    draft drugs ADDED or REMOVED by membership in ``A``; model-proposed
    additions outside ``A`` are logged REMOVED. If the result is empty the
    first drug of ``A`` is added; if ``A`` is empty too the visit is
    flagged degenerate.
    """
    history = DrugSet(active_history)
    additions = ordered_additions(signals)
    gate = set(additions)
    draft_list = [d for d in _canon(draft)]
    reasons: dict[tuple[str, str], str] = {}
    proposed_added: list[str] = []
    if proposed is not None:
        for e in proposed.audit_log:
            for d in _canon([e.drug]):
                if e.reason:
                    reasons.setdefault((e.action, d), e.reason)
                if e.action == "ADDED":
                    proposed_added.append(d)

    def why(action: str, drug: str, default: str) -> str:
        return reasons.get((action, drug), default)

    log_entries: list[AuditEntry] = []
    final: list[str] = []
    for d in history.sorted():
        final.append(d)
        log_entries.append(AuditEntry("KEPT", d, why("KEPT", d, "In active history; maintained.")))
    handled = set(history)
    for d in sorted(set(draft_list) - handled):
        if d in gate:
            final.append(d)
            log_entries.append(AuditEntry("ADDED", d, why("ADDED", d, "Drafted and listed in common additions.")))
        else:
            log_entries.append(AuditEntry("REMOVED", d, why("REMOVED", d, "Drafted but not supported by similar cases.")))
        handled.add(d)
    for d in sorted(set(proposed_added) - handled):
        if d in gate:
            final.append(d)
            log_entries.append(AuditEntry("ADDED", d, why("ADDED", d, "Proposed and listed in common additions.")))
        else:
            log_entries.append(AuditEntry("REMOVED", d, "Proposed addition is not in common additions."))
        handled.add(d)
    if not final and additions:
        d = additions[0]
        final.append(d)
        log_entries = [e for e in log_entries if e.drug != d]
        log_entries.append(AuditEntry("ADDED", d, "Empty fallback: first common addition."))

    final_set = DrugSet(final)
    llm_only: tuple[str, ...] = ()
    audit_only: tuple[str, ...] = ()
    diverged = False
    if proposed is not None:
        llm_final = set(_canon(proposed.final_prescription))
        llm_only = tuple(sorted(llm_final - final_set))
        audit_only = tuple(sorted(final_set - llm_final))
        diverged = bool(llm_only or audit_only)
    description = (proposed.final_description if proposed is not None and proposed.final_description
                   else f"Kept {len(history)} history drug(s); {len(final_set - history)} addition(s) passed the gate.")
    return RefinementResult(final_set, tuple(log_entries), description, not final_set, diverged, llm_only, audit_only)


# ---------------------------------------------------------------------------
# Stage 4


def _summary_validator(final: DrugSet):
    def check(text: str) -> str:
        sections = summary_sections(text)
        prescribe = sections["* Prescribe *"].casefold()
        missing = [d for d in final if d.casefold() not in prescribe]
        if missing:
            raise WrongShape(f"Prescribe section misses {missing}")
        return text
    return check


def generate_summary(rt: Runtime, ctx: VisitContext, signals: Sequence[TendencySignal], draft: Sequence[str],
                     result: RefinementResult, trace: Trace) -> str:
    state = note_text(ctx.visit).replace("\n", " ") + f" Active history: {drug_slot(ctx.active_history.sorted())}"
    bindings = {
        "patient_state": state,
        "initial_prescription": drug_slot(draft),
        "rag_tendency_by_focus": tendencies_slot(signals),
        "audit_log": json.dumps([{"action": e.action, "drug": e.drug} for e in result.audit_log]) if result.audit_log else EMPTY_SLOT,
        "final_answer_list": drug_slot(result.final_prescription.sorted()),
    }
    return _call(rt, trace, "summary", bindings, _summary_validator(result.final_prescription))


# ---------------------------------------------------------------------------
# Full pipeline


@dataclass
class PipelineOutput:
    initial_draft: list[str]
    focuses: list[FocusQuery]
    tendencies: list[TendencySignal]
    refinement: RefinementResult
    summary: str
    trace: Trace

    @property
    def prediction(self) -> DrugSet:
        return self.refinement.final_prescription

    def to_record(self) -> dict:
        return {
            "initial_draft": self.initial_draft,
            "focuses": [{"text": f.text, "source_field": f.source_field} for f in self.focuses],
            "tendencies": [t.to_dict() for t in self.tendencies],
            "refinement": self.refinement.to_dict(),
            "summary": self.summary,
        }


def run_pace(rt: Runtime, ctx: VisitContext, trace: Trace | None = None) -> PipelineOutput:
    trace = trace or Trace(rt.backend)
    draft = generate_initial_draft(rt, ctx, trace)
    focuses = extract_focus_queries(rt, ctx, trace)
    signals = [analyze_tendency(rt, ctx, f, retrieve_similar(rt, f), trace) for f in focuses]
    proposed = None
    if focuses:
        try:
            proposed = refine_prescription_llm(rt, ctx, signals, draft, trace)
        except MaxRetriesExceeded as exc:
            log.warning("%s: refinement output unparseable; audit proceeds alone", ctx.key)
            trace.error("refine", exc)
    result = audit_refinement(ctx.active_history, draft, signals, proposed)
    summary = ""
    if rt.config.with_summary:
        try:
            summary = generate_summary(rt, ctx, signals, draft, result, trace)
        except MaxRetriesExceeded as exc:
            trace.error("summary", exc)
    return PipelineOutput(draft, focuses, signals, result, summary, trace)


# ---------------------------------------------------------------------------
# Baselines


def run_zero_shot(rt: Runtime, ctx: VisitContext, trace: Trace) -> DrugSet:
    return DrugSet(generate_initial_draft(rt, ctx, trace))


def guideline_query(ctx: VisitContext) -> str:
    note = ctx.visit.note
    if isinstance(note, SoapNote):
        return " ".join(p for p in (note.subjective, note.objective, note.assessment) if p.strip())
    return diagnoses_text(note)


def _guideline_hits(rt: Runtime, ctx: VisitContext) -> list[str]:
    query = guideline_query(ctx)
    if not query.strip() or rt.guideline_index is None or not len(rt.guideline_index):
        return []
    return [h.entry.text for h in dense_retrieve(rt.guideline_index, query, rt.config.guideline_retrieval)]


def run_guideline_rag(rt: Runtime, ctx: VisitContext, trace: Trace) -> tuple[DrugSet, list[str]]:
    chunks = _guideline_hits(rt, ctx)
    b = _draft_bindings(ctx)
    b["similar_guidelines"] = "\n---\n".join(chunks) if chunks else EMPTY_SLOT
    return DrugSet(_call(rt, trace, "guideline", b, _draft_validator)), chunks


def treatrag_query(visit: Visit) -> str:
    note = visit.note
    if isinstance(note, SoapNote):
        return note.assessment if note.assessment.strip() else note.subjective
    return ", ".join(d.strip() for d in note.diagnoses)


def treatrag_candidates(pool: Cohort) -> list[IndexEntry]:
    """One candidate per pool patient: the latest visit, keyed by its query field."""
    out = []
    for record in pool:
        pos = len(record.visits) - 1
        visit = record.visits[pos]
        text = treatrag_query(visit)
        if not text.strip():
            continue
        tag = "diagnosis-list" if visit.flavor == "diagnosis" else (
            "assessment" if visit.note.assessment.strip() else "subjective")
        prior = record.visits[pos - 1].ground_truth if pos else DrugSet()
        out.append(IndexEntry(record.patient_id, tag, text, visit.ground_truth, prior, visit.visit_index))
    return out


def rank_treatrag(candidates: Sequence[IndexEntry], query: str, k: int | None = None,
                  adaptive: bool = True) -> list[RetrievedCase]:
    scores = [jaccard_bigram_similarity(query, c.text) for c in candidates]
    if adaptive:
        _, order = adaptive_filter(scores)
    else:
        order = sorted((i for i, s in enumerate(scores) if s > 0), key=lambda i: (-scores[i], i))
    if k is not None:
        order = order[:k]
    return [RetrievedCase(candidates[i], scores[i]) for i in order]


def run_treatrag(rt: Runtime, ctx: VisitContext, trace: Trace) -> tuple[DrugSet, list[RetrievedCase]]:
    cases = rank_treatrag(rt.treatrag_cases, treatrag_query(ctx.visit), rt.config.retrieval.k)
    for c in cases:
        if c.entry.patient_id in rt.test_ids:
            raise PoolLeakage(f"TreatRAG candidate from test patient {c.entry.patient_id!r}")
    similar = "\n\n".join(
        f"Case {i} (similarity {c.score:.3f})\n{c.entry.field_tag.capitalize()}: {c.entry.text}\n"
        f"Prescription: {drug_slot(c.entry.associated_drugs.sorted())}"
        for i, c in enumerate(cases, 1)
    )
    b = _draft_bindings(ctx)
    b["similar_cases"] = similar or EMPTY_SLOT
    return DrugSet(_call(rt, trace, "treatrag", b, _draft_validator)), cases


def run_medreflect(rt: Runtime, ctx: VisitContext, trace: Trace) -> tuple[DrugSet, list[str]]:
    draft = generate_initial_draft(rt, ctx, trace)
    previous = "\n".join(f"{_ordinal(v.visit_index + 1)} Visit) {drug_slot(v.ground_truth.sorted())}"
                         for v in ctx.history) or EMPTY_SLOT
    base = _note_bindings(ctx)
    base.update({"active_history": drug_slot(ctx.active_history.sorted()), "previous_prescription": previous,
                 "initial_prescription": drug_slot(draft)})
    question = _call(rt, trace, "medreflect_q", base, lambda t: parse_tag(t, "Reflective Question"))
    answer = _call(rt, trace, "medreflect_a", {**base, "reflective_question": question},
                   lambda t: parse_tag(t, "Reflective Answer"))
    vocab = rt.vocabulary

    def final_list(text: str) -> list[str]:
        drugs = _canon(parse_answer_list(text, vocab))
        if not drugs:
            raise EmptyBlock("<Answer> names no drug")
        return drugs

    final = _call(rt, trace, "medreflect_r",
                  {**base, "reflective_question": question, "reflective_answer": answer}, final_list)
    return DrugSet(final), draft
