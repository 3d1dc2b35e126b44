"""Turn raw sources into cohort files.

Two source shapes are supported:

* SOAP notes, either as a CSV (``patient_id,visit_order,note``) or as a
  directory tree ``<root>/<patient_id>/<visit>.txt`` sorted by file name.
  The Plan section of each note becomes the visit's ground truth.
* MIMIC-IV ``hosp`` tables (admissions, diagnoses_icd, d_icd_diagnoses,
  prescriptions), with NDC codes mapped to ATC class labels through an
  offline table. Admissions left without any mapped drug are excluded.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
import requests

from pacerag.cohort import (
    Admission,
    AtcMapping,
    Cohort,
    CohortFormatError,
    DrugSet,
    PatientRecord,
    UnparseableNote,
    Visit,
    map_ndc_to_atc,
    normalize_ndc,
    parse_soap,
    split_plan,
)

log = logging.getLogger(__name__)


@dataclass
class IngestReport:
    patients: int = 0
    visits: int = 0
    unparseable_notes: int = 0
    excluded_admissions: int = 0
    excluded_patients: int = 0
    unmapped_ndc: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {
            "patients": self.patients,
            "visits": self.visits,
            "unparseable_notes": self.unparseable_notes,
            "excluded_admissions": self.excluded_admissions,
            "excluded_patients": self.excluded_patients,
            "unmapped_ndc_total": sum(self.unmapped_ndc.values()),
            "unmapped_ndc": dict(sorted(self.unmapped_ndc.items())),
        }


def _soap_rows_from_dir(root: Path) -> list[tuple[str, str, str]]:
    rows = []
    for pdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(pdir.glob("*.txt")):
            rows.append((pdir.name, f.stem, f.read_text(encoding="utf-8")))
    return rows


def _soap_rows_from_csv(path: Path) -> list[tuple[str, str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "visit_order", "note"} - set(reader.fieldnames or ())
        if missing:
            raise CohortFormatError(f"{path}: missing columns {sorted(missing)}")
        return [(r["patient_id"], r["visit_order"], r["note"]) for r in reader]


def _order_key(value: str):
    try:
        return (0, float(value), "")
    except ValueError:
        return (1, 0.0, value)


def ingest_soap(source: str | Path) -> tuple[Cohort, IngestReport]:
    source = Path(source)
    if source.is_dir():
        rows = _soap_rows_from_dir(source)
    elif source.is_file():
        rows = _soap_rows_from_csv(source)
    else:
        raise CohortFormatError(f"SOAP source {source} does not exist")

    report = IngestReport()
    by_patient: dict[str, list[tuple[str, str]]] = {}
    for pid, order, note in rows:
        by_patient.setdefault(str(pid), []).append((order, note))

    records = []
    for pid in sorted(by_patient):
        visits = []
        for order, raw in sorted(by_patient[pid], key=lambda r: _order_key(r[0])):
            try:
                note = parse_soap(raw)
            except UnparseableNote:
                report.unparseable_notes += 1
                continue
            visits.append(Visit(len(visits), note, split_plan(note.plan)))
        if not visits:
            report.excluded_patients += 1
            continue
        records.append(PatientRecord(pid, tuple(visits)))
        report.visits += len(visits)
    report.patients = len(records)
    return Cohort(tuple(records)), report


def _read_table(root: Path, name: str, **kw) -> pd.DataFrame:
    for suffix in (".csv", ".csv.gz"):
        path = root / f"{name}{suffix}"
        if path.exists():
            return pd.read_csv(path, **kw)
    raise CohortFormatError(f"{root}: table {name}.csv(.gz) not found")


def ingest_mimic(hosp_dir: str | Path, mapping: AtcMapping) -> tuple[Cohort, IngestReport]:
    """Build admission records from MIMIC-IV ``hosp`` tables."""
    root = Path(hosp_dir)
    admissions = _read_table(root, "admissions", usecols=["subject_id", "hadm_id", "admittime"],
                             dtype={"subject_id": str, "hadm_id": str})
    diagnoses = _read_table(root, "diagnoses_icd",
                            usecols=["subject_id", "hadm_id", "seq_num", "icd_code", "icd_version"],
                            dtype={"subject_id": str, "hadm_id": str, "icd_code": str})
    titles = _read_table(root, "d_icd_diagnoses", usecols=["icd_code", "icd_version", "long_title"],
                         dtype={"icd_code": str})
    prescriptions = _read_table(root, "prescriptions", usecols=["subject_id", "hadm_id", "ndc"],
                                dtype={"subject_id": str, "hadm_id": str, "ndc": str})

    diagnoses = diagnoses.merge(titles, on=["icd_code", "icd_version"], how="left")
    diagnoses["long_title"] = diagnoses["long_title"].fillna(diagnoses["icd_code"])
    diagnoses = diagnoses.sort_values(["hadm_id", "seq_num"], kind="stable")
    dx_by_hadm = diagnoses.groupby("hadm_id", sort=False)["long_title"].agg(list).to_dict()

    report = IngestReport()
    drugs_by_hadm: dict[str, set[str]] = {}
    for hadm, ndc in zip(prescriptions["hadm_id"], prescriptions["ndc"].fillna("")):
        label = map_ndc_to_atc(ndc, mapping)
        if label is not None:
            drugs_by_hadm.setdefault(hadm, set()).add(label)
    report.unmapped_ndc = Counter(mapping.misses)

    admissions = admissions.assign(admittime=pd.to_datetime(admissions["admittime"]))
    admissions = admissions.sort_values(["subject_id", "admittime", "hadm_id"], kind="stable")
    records = []
    for pid, group in admissions.groupby("subject_id", sort=True):
        visits = []
        for hadm in group["hadm_id"]:
            dx = [t for t in dx_by_hadm.get(hadm, []) if isinstance(t, str) and t.strip()]
            drugs = DrugSet.of(drugs_by_hadm.get(hadm, ()))
            if not dx or not drugs:
                report.excluded_admissions += 1
                continue
            visits.append(Visit(len(visits), Admission(hadm, tuple(dx)), drugs))
        if not visits:
            report.excluded_patients += 1
            continue
        records.append(PatientRecord(str(pid), tuple(visits)))
        report.visits += len(visits)
    report.patients = len(records)
    return Cohort(tuple(records)), report


# ---------------------------------------------------------------------------
# RxNorm lookup (network; never used by the core pipeline)

RXNAV_URL = "https://rxnav.nlm.nih.gov/REST"


def fetch_atc_mapping(
    ndcs,
    base_url: str = RXNAV_URL,
    session: requests.Session | None = None,
    timeout: float = 20.0,
) -> AtcMapping:
    """Resolve NDC codes to ATC class names via the RxNav REST API.

    Codes that do not resolve are left out of the mapping and counted in
    ``misses``. The result is meant to be saved with :meth:`AtcMapping.save`.
    """
    http = session or requests.Session()
    base = base_url.rstrip("/")
    mapping = AtcMapping({})
    for code in sorted({normalize_ndc(c) for c in ndcs if normalize_ndc(c)}):
        label = None
        try:
            r = http.get(f"{base}/ndcstatus.json", params={"ndc": code}, timeout=timeout)
            r.raise_for_status()
            rxcui = (r.json().get("ndcStatus") or {}).get("rxcui")
            if rxcui:
                r = http.get(f"{base}/rxclass/class/byRxcui.json",
                             params={"rxcui": rxcui, "relaSource": "ATC"}, timeout=timeout)
                r.raise_for_status()
                infos = ((r.json().get("rxclassDrugInfoList") or {}).get("rxclassDrugInfo")) or []
                names = sorted({i["rxclassMinConceptItem"]["className"] for i in infos
                                if i.get("rxclassMinConceptItem", {}).get("className")})
                label = names[0] if names else None
        except (requests.RequestException, ValueError, KeyError) as exc:
            log.warning("RxNav lookup failed for %s: %s", code, exc)
        if label:
            mapping.entries[code] = label
        else:
            mapping.misses[code] += 1
    return mapping
