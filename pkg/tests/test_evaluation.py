from __future__ import annotations

import csv
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import paired_t_direct, set_metrics_oracle
from pacerag.evaluation import (
    NO_KEYWORDS_NOTICE,
    DEFAULT_SEEDS,
    EmptyGold,
    EvalError,
    JudgeCase,
    LengthMismatch,
    MetricReport,
    SeedCountMismatch,
    VisitScore,
    aggregate,
    average_scores,
    drug_precision_at_k,
    judge_keyword_relevance,
    paired_t_test,
    precision_at_k_curve,
    score_manifest_rows,
    score_visit,
    stars_for,
    summarize_judgements,
    t_two_tailed_p,
    write_precision_csv,
    write_report_csv,
    write_report_json,
)
from pacerag.llm import CompletionResult
from pacerag.prompts import JudgeVerdict

# Frozen from scipy.stats.ttest_rel / scipy.stats.t.sf (scipy 1.x), computed once offline.
SCIPY_PAIRED = [
    ([0.82, 0.80, 0.85, 0.81, 0.84], [0.78, 0.79, 0.80, 0.77, 0.80], 5.307910421576301, 0.006054734461189954),
    ([0.5, 0.6, 0.55, 0.52, 0.58], [0.51, 0.57, 0.56, 0.50, 0.59], 0.4588314677411235, 0.6701799733187811),
    ([1, 2, 3], [0.5, 1.9, 2.0], 2.0485900789263356, 0.17704880020217642),
    ([0.9, 0.91, 0.95, 0.9, 0.92], [0.1, 0.12, 0.09, 0.11, 0.1], 61.55756113860699, 4.1712090040232906e-07),
]
SCIPY_TAIL = [
    (0.5, 4, 0.6433299631818633),
    (2.776445105197793, 4, 0.05000000000000006),
    (12.0, 2, 0.00687293367715846),
    (-3.2, 9, 0.010831302589901327),
    (40, 4, 2.3340163226012694e-06),
]

drugs = st.sets(st.sampled_from("abcdefgh"), max_size=6)


# -- per-visit metrics --------------------------------------------------------------------


def test_score_visit_example():
    s = score_visit({"a", "b", "c"}, {"b", "c", "d", "e"})
    assert s == VisitScore(2 / 3, 0.5, pytest.approx(4 / 7), 2 / 5)


def test_empty_prediction_scores_zero():
    assert score_visit(set(), {"a"}) == VisitScore(0.0, 0.0, 0.0, 0.0)


def test_empty_gold_raises():
    with pytest.raises(EmptyGold):
        score_visit({"a"}, set())


@given(drugs, drugs.filter(bool))
def test_score_visit_matches_oracle(pred, gold):
    s = score_visit(pred, gold)
    assert (s.precision, s.recall, s.f1, s.accuracy) == pytest.approx(set_metrics_oracle(pred, gold))
    assert 0 <= s.accuracy <= s.f1 <= 1


def test_macro_and_micro_averaging():
    pairs = [({"a"}, {"a"}), ({"a", "b", "c", "d"}, {"a", "e"})]
    macro = average_scores(pairs, "macro")
    assert macro.precision == pytest.approx((1 + 0.25) / 2)
    micro = average_scores(pairs, "micro")
    assert (micro.precision, micro.recall, micro.accuracy) == pytest.approx((2 / 5, 2 / 3, 2 / 6))
    with pytest.raises(ValueError):
        average_scores(pairs, "weighted")
    with pytest.raises(EvalError):
        average_scores([])


# -- aggregation ------------------------------------------------------------------------------


def test_published_seed_list():
    # Reference value: the five seeds used for every reported number.
    assert DEFAULT_SEEDS == (42, 137, 2025, 3141, 7777)


def test_aggregate_mean_and_sample_std():
    per_seed = {s: VisitScore(0.8, 0.8, v, 0.8) for s, v in zip(DEFAULT_SEEDS, [0.8, 0.8, 0.8, 0.8, 0.9])}
    rep = aggregate(per_seed, DEFAULT_SEEDS, "pace", "qwen", n_visits=10)
    assert rep.mean["f1"] == pytest.approx(0.82)
    assert rep.std["f1"] == pytest.approx(math.sqrt(0.002))
    assert rep.std["precision"] == 0.0 and rep.flags == []
    assert MetricReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep


def test_aggregate_seed_checks():
    per_seed = {42: VisitScore(1, 1, 1, 1)}
    with pytest.raises(SeedCountMismatch):
        aggregate(per_seed, [42, 137])
    rep = aggregate(per_seed, [42])
    assert rep.std["f1"] == 0.0 and rep.flags == ["single-seed"]


# -- significance -------------------------------------------------------------------------------


@pytest.mark.parametrize("ours, base, t, p", SCIPY_PAIRED)
def test_paired_t_matches_scipy(ours, base, t, p):
    res = paired_t_test(ours, base, "b")
    assert res.t == pytest.approx(t, rel=1e-12)
    assert res.t == pytest.approx(paired_t_direct(ours, base), rel=1e-12)
    assert res.p == pytest.approx(p, rel=1e-9, abs=1e-15)
    assert res.stars == stars_for(p)


@pytest.mark.parametrize("t, df, p", SCIPY_TAIL)
def test_two_tailed_p_matches_scipy(t, df, p):
    assert t_two_tailed_p(t, df) == pytest.approx(p, rel=1e-9, abs=1e-15)


def test_stars_thresholds():
    assert [stars_for(p) for p in (0.001, 0.0099, 0.01, 0.049, 0.05, 0.5)] == ["**", "**", "*", "*", "", ""]


def test_zero_variance_differences():
    same = paired_t_test([0.5] * 5, [0.5] * 5)
    assert (same.t, same.p, same.stars, same.degenerate) == (0.0, 1.0, "", "ZeroVarianceDifferences")
    shift = paired_t_test([0.6] * 3, [0.5] * 3)
    assert shift.t == math.inf and shift.p == 0.0 and shift.stars == ""


def test_length_checks():
    with pytest.raises(LengthMismatch):
        paired_t_test([1, 2], [1])
    with pytest.raises(LengthMismatch):
        paired_t_test([1], [1])


@settings(max_examples=50)
@given(st.floats(-50, 50), st.integers(1, 30))
def test_p_value_is_a_probability_and_monotone(t, df):
    p = t_two_tailed_p(t, df)
    assert 0.0 <= p <= 1.0
    assert t_two_tailed_p(abs(t) + 1, df) <= p + 1e-12


# -- precision@k ------------------------------------------------------------------------------------


def test_drug_precision_at_k_example():
    cases = [{"a", "b"}, {"c"}, {"a", "d"}]
    gold = {"a", "c"}
    assert [drug_precision_at_k(cases, gold, k) for k in (1, 2, 3, 9)] == [0.5, 2 / 3, 0.5, 0.5]
    assert drug_precision_at_k([], gold, 1) == 0.0
    with pytest.raises(ValueError):
        drug_precision_at_k(cases, gold, 0)


def test_precision_curve_averages_visits(tmp_path):
    visits = [([{"a"}, {"b"}], {"a"}), ([{"b"}], {"b"})]
    curve = precision_at_k_curve("m", visits, ks=(1, 2))
    assert curve.precision == [1.0, 0.75] and curve.n_visits == 2
    assert precision_at_k_curve("m", [], ks=(1,)).precision == [0.0]
    write_precision_csv(tmp_path / "p.csv", [curve])
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows == [["method", "k", "precision"], ["m", "1", "1.000000"], ["m", "2", "0.750000"]]


# -- manifests and reports ----------------------------------------------------------------------------


def test_score_manifest_rows():
    rows = [{"prediction": ["A"], "gold": ["a"]}, {"prediction": [], "gold": ["b"], "degenerate_empty": True}]
    score, n, degenerate = score_manifest_rows(rows)
    assert (score.f1, n, degenerate) == (0.5, 2, 1)


def test_report_files(tmp_path):
    a = aggregate({42: VisitScore(1, 1, 1, 1), 137: VisitScore(1, 1, 0.9, 1)}, [42, 137], "pace", "q")
    b = aggregate({42: VisitScore(1, 1, 0.5, 1), 137: VisitScore(1, 1, 0.6, 1)}, [42, 137], "zero_shot", "q")
    sig = {"f1": [paired_t_test(a.series("f1"), b.series("f1"), "zero_shot", "f1")]}
    write_report_csv(tmp_path / "r.csv", [a, b], sig)
    rows = list(csv.DictReader(open(tmp_path / "r.csv")))
    assert len(rows) == 8
    zs = next(r for r in rows if r["method"] == "zero_shot" and r["metric"] == "f1")
    assert zs["stars"] == sig["f1"][0].stars and zs["mean"] == "0.550000"
    write_report_json(tmp_path / "r.json", [a, b], sig, extra={"note": "x"})
    payload = json.loads((tmp_path / "r.json").read_text())
    assert payload["note"] == "x" and payload["significance"]["f1"][0]["baseline"] == "zero_shot"


# -- judge --------------------------------------------------------------------------------------------


class _Judge:
    def __init__(self, *outputs):
        self.outputs, self.calls = list(outputs), []

    def complete(self, messages, params, stage=""):
        self.calls.append((messages, params, stage))
        return CompletionResult(self.outputs.pop(0))


def test_judge_uses_zero_temperature_and_notice():
    # Reference value: the judge runs at temperature 0.0.
    be = _Judge("garbage", "Relevance (1-5): 2\nExplanation: missed.\nSummary: weak.")
    case = JudgeCase("P1:2", "Subjective: tremor", "", ("levodopa",), ())
    verdict = judge_keyword_relevance(be, case)
    assert verdict.score == 2 and len(be.calls) == 2
    messages, params, stage = be.calls[0]
    assert params.temperature == 0.0 and stage == "judge"
    assert NO_KEYWORDS_NOTICE in messages[-1].content


def test_summarize_judgements():
    s = summarize_judgements({"a": JudgeVerdict(5), "b": JudgeVerdict(3)})
    assert (s.n, s.mean, s.sd) == (2, 4.0, pytest.approx(math.sqrt(2)))
    assert summarize_judgements({}).n == 0
