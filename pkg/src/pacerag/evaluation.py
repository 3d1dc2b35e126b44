"""Set metrics, seed aggregation, paired t-tests, Drug Precision@k and the judge harness."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from pacerag.cohort import DrugSet
from pacerag.llm import Backend, GenerationParams, complete_with_repair
from pacerag.prompts import EMPTY_SLOT, JudgeVerdict, get_template, parse_judge, render

METRICS = ("f1", "accuracy", "precision", "recall")
DEFAULT_SEEDS = (42, 137, 2025, 3141, 7777)


class EvalError(Exception):
    pass


class EmptyGold(EvalError, ValueError):
    pass


class SeedCountMismatch(EvalError, ValueError):
    pass


class LengthMismatch(EvalError, ValueError):
    pass


# ---------------------------------------------------------------------------
# Per-visit scores


@dataclass(frozen=True)
class VisitScore:
    precision: float
    recall: float
    f1: float
    accuracy: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def score_visit(pred: Iterable[str], gold: Iterable[str]) -> VisitScore:
    """Precision, recall, F1 and Jaccard accuracy of one predicted drug set."""
    pred, gold = set(pred), set(gold)
    if not gold:
        raise EmptyGold("gold prescription is empty")
    inter = len(pred & gold)
    precision = inter / len(pred) if pred else 0.0
    recall = inter / len(gold)
    return VisitScore(precision, recall, _harmonic(precision, recall), inter / len(pred | gold))


def average_scores(pairs: Sequence[tuple[Iterable[str], Iterable[str]]], mode: str = "macro") -> VisitScore:
    """Average over visits. ``macro`` weights visits equally; ``micro`` pools the counts."""
    if not pairs:
        raise EvalError("no visits to average")
    if mode == "macro":
        scores = [score_visit(p, g) for p, g in pairs]
        return VisitScore(*(math.fsum(getattr(s, m) for s in scores) / len(scores)
                            for m in ("precision", "recall", "f1", "accuracy")))
    if mode != "micro":
        raise ValueError(f"unknown averaging mode {mode!r}")
    inter = n_pred = n_gold = n_union = 0
    for p, g in pairs:
        p, g = set(p), set(g)
        if not g:
            raise EmptyGold("gold prescription is empty")
        inter += len(p & g)
        n_pred += len(p)
        n_gold += len(g)
        n_union += len(p | g)
    precision = inter / n_pred if n_pred else 0.0
    recall = inter / n_gold
    return VisitScore(precision, recall, _harmonic(precision, recall), inter / n_union)


# ---------------------------------------------------------------------------
# Seed aggregation


@dataclass
class MetricReport:
    method: str
    backbone: str
    seeds: list[int]
    per_seed: dict[int, dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]
    n_visits: int
    degenerate_empty_count: int = 0
    averaging: str = "macro"
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_seed"] = {str(k): v for k, v in self.per_seed.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["per_seed"] = {int(k): v for k, v in d["per_seed"].items()}
        return cls(**d)

    def series(self, metric: str) -> list[float]:
        return [self.per_seed[s][metric] for s in self.seeds]


def aggregate(per_seed: Mapping[int, VisitScore], seeds: Sequence[int], method: str = "", backbone: str = "",
              n_visits: int = 0, degenerate_empty_count: int = 0, averaging: str = "macro") -> MetricReport:
    """Cross-seed mean and sample standard deviation of per-seed averages.

    ``per_seed`` must hold exactly the configured ``seeds``. A single seed
    gets std 0 and the ``single-seed`` flag.
    """
    seeds = list(seeds)
    if sorted(per_seed) != sorted(seeds) or len(set(seeds)) != len(seeds):
        raise SeedCountMismatch(f"scores for seeds {sorted(per_seed)} but configured {seeds}")
    table = {s: {m: float(getattr(per_seed[s], m)) for m in METRICS} for s in seeds}
    mean, std, flags = {}, {}, []
    for m in METRICS:
        values = [table[s][m] for s in seeds]
        mean[m] = statistics.fmean(values)
        std[m] = statistics.stdev(values) if len(values) > 1 else 0.0
    if len(seeds) == 1:
        flags.append("single-seed")
    return MetricReport(method, backbone, seeds, table, mean, std, n_visits, degenerate_empty_count, averaging, flags)


# ---------------------------------------------------------------------------
# Student t distribution by numerical integration


def t_pdf(x: float, df: float) -> float:
    log_c = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(log_c - (df + 1) / 2 * math.log1p(x * x / df))


def _simpson(f, a: float, b: float, fa: float, fm: float, fb: float) -> float:
    return (b - a) / 6 * (fa + 4 * fm + fb)


def adaptive_simpson(f, a: float, b: float, tol: float = 1e-14, max_depth: int = 60) -> float:
    fa, fb, m = f(a), f(b), (a + b) / 2
    fm = f(m)
    whole = _simpson(f, a, b, fa, fm, fb)
    # Explicit stack instead of recursion: (a, b, fa, fm, fb, whole, tol, depth)
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    total = 0.0
    while stack:
        a, b, fa, fm, fb, whole, tol, depth = stack.pop()
        m = (a + b) / 2
        lm, rm = (a + m) / 2, (m + b) / 2
        flm, frm = f(lm), f(rm)
        left = _simpson(f, a, m, fa, flm, fm)
        right = _simpson(f, m, b, fm, frm, fb)
        delta = left + right - whole
        if depth >= max_depth or abs(delta) <= 15 * tol:
            total += left + right + delta / 15
        else:
            stack.append((a, m, fa, flm, fm, left, tol / 2, depth + 1))
            stack.append((m, b, fm, frm, fb, right, tol / 2, depth + 1))
    return total


def t_two_tailed_p(t: float, df: float) -> float:
    """Two-tailed p-value ``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    x = abs(t)
    if math.isinf(x):
        return 0.0
    if x <= 1.0:
        return max(0.0, min(1.0, 1.0 - 2 * adaptive_simpson(lambda u: t_pdf(u, df), 0.0, x)))
    # Tail integral with x = |t| / u, u in (0, 1].
    def g(u: float) -> float:
        return 0.0 if u == 0.0 else t_pdf(x / u, df) * x / (u * u)
    return max(0.0, min(1.0, 2 * adaptive_simpson(g, 0.0, 1.0)))


def stars_for(p: float) -> str:
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class SignificanceResult:
    baseline: str
    metric: str
    t: float
    p: float
    stars: str
    n: int
    degenerate: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def paired_t_test(ours: Sequence[float], baseline: Sequence[float], baseline_name: str = "",
                  metric: str = "f1") -> SignificanceResult:
    """Two-tailed paired t-test over seed-paired values.

    Zero-variance differences are reported through ``degenerate`` rather
    than raised: identical series give t=0, p=1; a constant non-zero shift
    gives t=±inf, p=0. Stars are withheld in both cases.
    """
    if len(ours) != len(baseline):
        raise LengthMismatch(f"{len(ours)} vs {len(baseline)} paired values")
    n = len(ours)
    if n < 2:
        raise LengthMismatch("paired t-test needs at least two pairs")
    diffs = [float(a) - float(b) for a, b in zip(ours, baseline)]
    mean_d = math.fsum(diffs) / n
    sd = statistics.stdev(diffs)
    if sd == 0.0:
        if mean_d == 0.0:
            return SignificanceResult(baseline_name, metric, 0.0, 1.0, "", n, "ZeroVarianceDifferences")
        return SignificanceResult(baseline_name, metric, math.copysign(math.inf, mean_d), 0.0, "", n,
                                  "ZeroVarianceDifferences")
    t = mean_d / (sd / math.sqrt(n))
    p = t_two_tailed_p(t, n - 1)
    return SignificanceResult(baseline_name, metric, t, p, stars_for(p), n)


# ---------------------------------------------------------------------------
# Drug Precision@k


@dataclass
class PrecisionAtK:
    method: str
    ks: list[int]
    precision: list[float]
    n_visits: int = 0

    def rows(self) -> list[tuple[str, int, float]]:
        return [(self.method, k, p) for k, p in zip(self.ks, self.precision)]


def drug_precision_at_k(ranked_cases: Sequence[Iterable[str]], gold: Iterable[str], k: int) -> float:
    """``|U_k ∩ gold| / |U_k|`` where ``U_k`` is the union of the top-k cases' drugs."""
    if k < 1:
        raise ValueError("k must be >= 1")
    union: set[str] = set()
    for drugs in ranked_cases[:k]:
        union |= set(drugs)
    return len(union & set(gold)) / len(union) if union else 0.0


def precision_at_k_curve(method: str, visits: Sequence[tuple[Sequence[Iterable[str]], Iterable[str]]],
                         ks: Sequence[int] = tuple(range(1, 8))) -> PrecisionAtK:
    """Mean Drug Precision@k over visits, each given as (ranked case drug sets, gold)."""
    if not visits:
        return PrecisionAtK(method, list(ks), [0.0] * len(ks), 0)
    values = [math.fsum(drug_precision_at_k(cases, gold, k) for cases, gold in visits) / len(visits) for k in ks]
    return PrecisionAtK(method, list(ks), values, len(visits))


# ---------------------------------------------------------------------------
# Judge harness


@dataclass(frozen=True)
class JudgeCase:
    key: str
    patient_input: str
    history: str
    gold: tuple[str, ...]
    keywords: tuple[str, ...]


NO_KEYWORDS_NOTICE = "No keywords were extracted."


def judge_keyword_relevance(backend: Backend, case: JudgeCase, flavor: str = "soap",
                            params: GenerationParams | None = None, max_attempts: int = 3) -> JudgeVerdict:
    params = params or GenerationParams(temperature=0.0)
    bindings = {
        "patient_input": case.patient_input,
        "history_soap": case.history or EMPTY_SLOT,
        "gt_txt": json.dumps(list(case.gold), ensure_ascii=False),
        "focus_desc": json.dumps(list(case.keywords), ensure_ascii=False) if case.keywords else NO_KEYWORDS_NOTICE,
    }
    messages = render(get_template("judge", flavor), bindings)
    return complete_with_repair(backend, messages, params, parse_judge, stage="judge",
                                max_attempts=max_attempts).value


@dataclass
class JudgeSummary:
    n: int
    mean: float
    sd: float
    scores: dict[str, int]


def summarize_judgements(verdicts: Mapping[str, JudgeVerdict]) -> JudgeSummary:
    scores = {k: v.score for k, v in verdicts.items()}
    values = list(scores.values())
    if not values:
        return JudgeSummary(0, 0.0, 0.0, {})
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return JudgeSummary(len(values), statistics.fmean(values), sd, scores)


# ---------------------------------------------------------------------------
# Manifest scoring and report files


def score_manifest_rows(rows: Sequence[dict], mode: str = "macro") -> tuple[VisitScore, int, int]:
    """(average score, visit count, degenerate-empty count) for one manifest."""
    pairs = [(DrugSet.of(r["prediction"]), DrugSet.of(r["gold"])) for r in rows]
    degenerate = sum(1 for r in rows if r.get("degenerate_empty"))
    return average_scores(pairs, mode), len(pairs), degenerate


def write_report_json(path: str | Path, reports: Sequence[MetricReport],
                      significance: Mapping[str, Sequence[SignificanceResult]] | None = None,
                      curves: Sequence[PrecisionAtK] = (), extra: dict | None = None) -> None:
    payload = {
        "reports": [r.to_dict() for r in reports],
        "significance": {m: [s.to_dict() for s in rows] for m, rows in (significance or {}).items()},
        "precision_at_k": [asdict(c) for c in curves],
    }
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def write_report_csv(path: str | Path, reports: Sequence[MetricReport],
                     significance: Mapping[str, Sequence[SignificanceResult]] | None = None) -> None:
    """One row per (method, backbone, metric)."""
    stars: dict[tuple[str, str], str] = {}
    for _, results in (significance or {}).items():
        for s in results:
            stars[(s.baseline, s.metric)] = s.stars
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "backbone", "metric", "mean", "std", "stars"])
        for r in reports:
            for m in METRICS:
                w.writerow([r.method, r.backbone, m, f"{r.mean[m]:.6f}", f"{r.std[m]:.6f}",
                            stars.get((r.method, m), "")])


def write_precision_csv(path: str | Path, curves: Sequence[PrecisionAtK]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "k", "precision"])
        for c in curves:
            for method, k, p in c.rows():
                w.writerow([method, k, f"{p:.6f}"])
