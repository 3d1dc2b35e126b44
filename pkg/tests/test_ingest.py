from __future__ import annotations

import pandas as pd
import pytest
import requests

from pacerag.cohort import Admission, AtcMapping, CohortFormatError
from pacerag.ingest import fetch_atc_mapping, ingest_mimic, ingest_soap


@pytest.fixture
def soap_dir(tmp_path):
    root = tmp_path / "notes"
    (root / "A").mkdir(parents=True)
    (root / "B").mkdir()
    (root / "C").mkdir()
    (root / "A" / "01.txt").write_text("S: tremor\nA: PD\nP: Levodopa, Carbidopa")
    (root / "A" / "02.txt").write_text("S: hallucinations\nA: PD\nP: Levodopa; Quetiapine")
    (root / "B" / "01.txt").write_text("Subjective: stable\nPlan: Rasagiline")
    (root / "B" / "02.txt").write_text("no tags at all")
    (root / "C" / "01.txt").write_text("free text")
    return root


def test_soap_directory_counts(soap_dir):
    cohort, report = ingest_soap(soap_dir)
    assert report.to_dict() == {
        "patients": 2, "visits": 3, "unparseable_notes": 2, "excluded_admissions": 0,
        "excluded_patients": 1, "unmapped_ndc_total": 0, "unmapped_ndc": {},
    }
    a = cohort.get("A")
    assert [v.ground_truth.sorted() for v in a.visits] == [["carbidopa", "levodopa"], ["levodopa", "quetiapine"]]


def test_soap_csv_orders_visits_numerically(tmp_path):
    p = tmp_path / "notes.csv"
    pd.DataFrame({
        "patient_id": ["X", "X", "X"],
        "visit_order": ["10", "2", "1"],
        "note": ["S: c\nP: C", "S: b\nP: B", "S: a\nP: A"],
    }).to_csv(p, index=False)
    cohort, _ = ingest_soap(p)
    assert [v.note.subjective for v in cohort.get("X").visits] == ["a", "b", "c"]


def test_soap_csv_missing_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("patient_id,note\nX,S: a\n")
    with pytest.raises(CohortFormatError):
        ingest_soap(p)


@pytest.fixture
def mimic_dir(tmp_path):
    root = tmp_path / "hosp"
    root.mkdir()
    pd.DataFrame({
        "subject_id": ["1", "1", "2"],
        "hadm_id": ["11", "12", "21"],
        "admittime": ["2150-01-02", "2150-01-01", "2150-03-01"],
    }).to_csv(root / "admissions.csv", index=False)
    pd.DataFrame({
        "subject_id": ["1", "1", "1", "2"],
        "hadm_id": ["11", "11", "12", "21"],
        "seq_num": [2, 1, 1, 1],
        "icd_code": ["I10", "A41", "N17", "E11"],
        "icd_version": [10, 10, 10, 10],
    }).to_csv(root / "diagnoses_icd.csv", index=False)
    pd.DataFrame({
        "icd_code": ["I10", "A41", "N17", "E11"],
        "icd_version": [10, 10, 10, 10],
        "long_title": ["Hypertension", "Sepsis", "Acute kidney failure", "Type 2 diabetes"],
    }).to_csv(root / "d_icd_diagnoses.csv", index=False)
    pd.DataFrame({
        "subject_id": ["1", "1", "1", "2"],
        "hadm_id": ["11", "11", "12", "21"],
        "ndc": ["0093-7146-56", "00000000001", "00000000001", "55555555555"],
    }).to_csv(root / "prescriptions.csv", index=False)
    return root


def test_mimic_one_unmapped_ndc_excludes_one_admission(mimic_dir):
    mapping = AtcMapping({"0093714656": "ACE inhibitors, plain", "00000000001": "Insulins"})
    cohort, report = ingest_mimic(mimic_dir, mapping)
    d = report.to_dict()
    assert d["excluded_admissions"] == 1 and d["excluded_patients"] == 1
    assert d["unmapped_ndc"] == {"55555555555": 1}
    rec = cohort.get("1")
    # Admissions are ordered by admit time; diagnoses by sequence number.
    assert [v.note.admission_id for v in rec.visits] == ["12", "11"]
    assert isinstance(rec.visits[1].note, Admission)
    assert rec.visits[1].note.diagnoses == ("Sepsis", "Hypertension")
    assert rec.visits[1].ground_truth.sorted() == ["ace inhibitors, plain", "insulins"]


def test_mimic_missing_table(tmp_path):
    with pytest.raises(CohortFormatError):
        ingest_mimic(tmp_path, AtcMapping({}))


class _FakeResponse:
    def __init__(self, payload, status=200):
        self.payload, self.status_code = payload, status

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(str(self.status_code))

    def json(self):
        return self.payload


class _FakeSession:
    def __init__(self):
        self.calls = []

    def get(self, url, params=None, timeout=None):
        self.calls.append((url.rsplit("/", 1)[-1], dict(params)))
        if url.endswith("ndcstatus.json"):
            rx = {"0093714656": "123", "11111111111": None}.get(params["ndc"], "err")
            if rx == "err":
                return _FakeResponse({}, 500)
            return _FakeResponse({"ndcStatus": {"rxcui": rx}})
        return _FakeResponse({"rxclassDrugInfoList": {"rxclassDrugInfo": [
            {"rxclassMinConceptItem": {"className": "ACE INHIBITORS, PLAIN"}},
            {"rxclassMinConceptItem": {"className": "ACE inhibitors and diuretics"}},
        ]}})


def test_fetch_atc_mapping_with_fake_session():
    session = _FakeSession()
    mapping = fetch_atc_mapping(["0093-7146-56", "11111111111", "22222222222"], "http://x", session)
    assert mapping.entries == {"0093714656": "ACE INHIBITORS, PLAIN"}
    assert dict(mapping.misses) == {"11111111111": 1, "22222222222": 1}
    assert ("byRxcui.json", {"rxcui": "123", "relaSource": "ATC"}) in session.calls
