"""Cohort data model: visits, patients, drug sets, splitting and serialization."""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

HISTORY_WINDOW = 3


class CohortError(Exception):
    """Base class for data-level errors (bad notes, bad files, bad splits)."""


class UnparseableNote(CohortError):
    pass


class EmptyLabel(CohortError, ValueError):
    pass


class InvalidSplit(CohortError, ValueError):
    pass


class CohortFormatError(CohortError):
    pass


# ---------------------------------------------------------------------------
# Drug labels

# Brackets and percent/plus signs are kept: they are part of real class names.
_STRIP_CHARS = " \t\r\n.,;:!?*-_'\"`|/\\#•"


def canonicalize_drug(label: str) -> str:
    """Case-fold, collapse whitespace and trim surrounding punctuation.

    Internal punctuation survives, so ATC names such as
    ``"ACE inhibitors, plain"`` keep their comma.
    """
    if label is None:
        raise EmptyLabel("drug label is None")
    text = " ".join(str(label).casefold().split())
    text = text.strip(_STRIP_CHARS)
    if not text:
        raise EmptyLabel(f"drug label {label!r} is empty after canonicalization")
    return text


class DrugSet(frozenset):
    """Immutable set of canonical drug labels.

    Iteration order of the underlying frozenset is arbitrary; use
    :meth:`sorted` wherever output must be reproducible.
    """

    @classmethod
    def of(cls, labels: Iterable[str] = ()) -> "DrugSet":
        out = set()
        for label in labels:
            try:
                out.add(canonicalize_drug(label))
            except EmptyLabel:
                continue
        return cls(out)

    def sorted(self) -> list[str]:
        return sorted(self)

    def __repr__(self) -> str:
        return f"DrugSet({self.sorted()!r})"


def ordered_unique(labels: Iterable[str]) -> list[str]:
    """Canonicalize labels, dropping empties and duplicates, keeping first-seen order."""
    seen: set[str] = set()
    out: list[str] = []
    for label in labels:
        try:
            canon = canonicalize_drug(label)
        except EmptyLabel:
            continue
        if canon not in seen:
            seen.add(canon)
            out.append(canon)
    return out


# ---------------------------------------------------------------------------
# Records


@dataclass(frozen=True)
class SoapNote:
    subjective: str = ""
    objective: str = ""
    assessment: str = ""
    plan: str = ""

    def without_plan(self) -> "SoapNote":
        return SoapNote(self.subjective, self.objective, self.assessment, "")


@dataclass(frozen=True)
class Admission:
    admission_id: str
    diagnoses: tuple[str, ...]


@dataclass(frozen=True)
class Visit:
    visit_index: int
    note: SoapNote | Admission
    ground_truth: DrugSet = field(default_factory=DrugSet)

    @property
    def kind(self) -> str:
        return "soap" if isinstance(self.note, SoapNote) else "admission"

    @property
    def flavor(self) -> str:
        return "soap" if isinstance(self.note, SoapNote) else "diagnosis"

    def input_view(self) -> "Visit":
        """The visit as the model sees it at prediction time (no plan)."""
        if isinstance(self.note, SoapNote):
            return Visit(self.visit_index, self.note.without_plan(), self.ground_truth)
        return self


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if not self.visits:
            raise CohortFormatError(f"patient {self.patient_id!r} has no visits")
        indices = [v.visit_index for v in self.visits]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise CohortFormatError(f"patient {self.patient_id!r}: visit_index not strictly increasing")


@dataclass(frozen=True)
class Cohort:
    patients: tuple[PatientRecord, ...]

    def __post_init__(self):
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            dup = [k for k, n in Counter(ids).items() if n > 1]
            raise CohortFormatError(f"duplicate patient ids: {dup[:5]}")

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self) -> Iterator[PatientRecord]:
        return iter(self.patients)

    @property
    def patient_ids(self) -> frozenset[str]:
        return frozenset(p.patient_id for p in self.patients)

    @property
    def n_visits(self) -> int:
        return sum(len(p.visits) for p in self.patients)

    def get(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def drug_vocabulary(self) -> list[str]:
        vocab: set[str] = set()
        for p in self.patients:
            for v in p.visits:
                vocab |= v.ground_truth
        return sorted(vocab)


# ---------------------------------------------------------------------------
# SOAP parsing

_SECTION_TAG = re.compile(
    r"^[ \t]*(subjective|objective|assessment|plan|s|o|a|p)[ \t]*:",
    re.IGNORECASE | re.MULTILINE,
)
_TAG_FIELD = {"s": "subjective", "o": "objective", "a": "assessment", "p": "plan"}


def parse_soap(raw_note: str) -> SoapNote:
    """Split a tagged note into its four SOAP sections.

    A section tag is ``subjective|objective|assessment|plan`` or a single
    ``S|O|A|P`` letter, any casing, at the start of a line and followed by a
    colon. Text before the first tag is dropped; repeated sections are
    joined with a newline.
    """
    matches = list(_SECTION_TAG.finditer(raw_note or ""))
    if not matches:
        raise UnparseableNote("no S/O/A/P section tag found")
    parts: dict[str, list[str]] = {f: [] for f in _TAG_FIELD.values()}
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw_note)
        name = m.group(1).lower()
        name = _TAG_FIELD.get(name, name)
        body = raw_note[m.end():end].strip()
        if body:
            parts[name].append(body)
    return SoapNote(**{k: "\n".join(v) for k, v in parts.items()})


def split_plan(plan: str) -> DrugSet:
    """Drug labels from a free-text plan: one per line, comma or semicolon."""
    return DrugSet.of(re.split(r"[,;\n]", plan or ""))


# ---------------------------------------------------------------------------
# History


def build_history_window(record: PatientRecord, t: int, size: int = HISTORY_WINDOW) -> list[Visit]:
    """Up to ``size`` visits immediately preceding position ``t``, oldest first."""
    if not 0 <= t < len(record.visits):
        raise IndexError(f"visit position {t} out of range for {len(record.visits)} visits")
    return list(record.visits[max(0, t - size):t])


def active_medications(history: Sequence[Visit]) -> DrugSet:
    """Most recent prescription in the window; empty when there is no history."""
    return history[-1].ground_truth if history else DrugSet()


# ---------------------------------------------------------------------------
# Splitting


@dataclass(frozen=True)
class SplitSpec:
    """``ratio``: fraction of patients kept in the retrieval pool.
    ``fixed-test-count``: number of visits (admissions) targeted for the test set.
    """

    mode: str = "ratio"
    value: float = 0.8
    seed: int = 42

    def __post_init__(self):
        if self.mode not in ("ratio", "fixed-test-count"):
            raise InvalidSplit(f"unknown split mode {self.mode!r}")
        if self.mode == "ratio" and not 0.0 < float(self.value) < 1.0:
            raise InvalidSplit(f"ratio must be in (0, 1), got {self.value}")
        if self.mode == "fixed-test-count" and (int(self.value) != self.value or self.value < 1):
            raise InvalidSplit(f"fixed test count must be a positive integer, got {self.value}")


def split_cohort(cohort: Cohort, spec: SplitSpec) -> tuple[Cohort, Cohort]:
    """Patient-level split into (retrieval_pool, test_set)."""
    n = len(cohort)
    if n < 2:
        raise InvalidSplit("need at least two patients to split")
    ids = sorted(cohort.patient_ids)
    random.Random(spec.seed).shuffle(ids)
    by_id = {p.patient_id: p for p in cohort}

    if spec.mode == "ratio":
        n_pool = int(spec.value * n)
        if n_pool < 1 or n_pool >= n:
            raise InvalidSplit(f"ratio {spec.value} leaves an empty side for {n} patients")
        pool_ids, test_ids = ids[:n_pool], ids[n_pool:]
    else:
        target = int(spec.value)
        if target >= cohort.n_visits:
            raise InvalidSplit(f"test count {target} >= total visits {cohort.n_visits}")
        test_ids, taken = [], 0
        for pid in ids:
            if taken >= target:
                break
            test_ids.append(pid)
            taken += len(by_id[pid].visits)
        chosen = set(test_ids)
        pool_ids = [pid for pid in ids if pid not in chosen]
        if not pool_ids:
            raise InvalidSplit("fixed test count consumed every patient")

    order = {p.patient_id: i for i, p in enumerate(cohort.patients)}
    pool = Cohort(tuple(sorted((by_id[i] for i in pool_ids), key=lambda p: order[p.patient_id])))
    test = Cohort(tuple(sorted((by_id[i] for i in test_ids), key=lambda p: order[p.patient_id])))
    return pool, test


# ---------------------------------------------------------------------------
# NDC -> ATC


def normalize_ndc(code: str) -> str:
    return re.sub(r"\D", "", str(code or ""))


@dataclass
class AtcMapping:
    entries: dict[str, str]
    misses: Counter = field(default_factory=Counter)

    @classmethod
    def load(cls, path: str | Path) -> "AtcMapping":
        """Read a two-column NDC/label table (tab- or comma-delimited).

        Only the first delimiter on a line splits, so labels may contain commas.
        """
        entries: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\r\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                delim = "\t" if "\t" in line else ","
                if delim not in line:
                    raise CohortFormatError(f"{path}:{lineno}: expected two columns")
                code, label = line.split(delim, 1)
                ndc = normalize_ndc(code)
                if not ndc:
                    if lineno == 1:
                        continue  # header
                    raise CohortFormatError(f"{path}:{lineno}: bad NDC {code!r}")
                label = label.strip().strip('"')
                if label:
                    entries[ndc] = label
        return cls(entries)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("ndc\tatc_label\n")
            for ndc in sorted(self.entries):
                fh.write(f"{ndc}\t{self.entries[ndc]}\n")

    @property
    def excluded_count(self) -> int:
        return sum(self.misses.values())


def map_ndc_to_atc(ndc: str, mapping: AtcMapping) -> str | None:
    """ATC class label for ``ndc``; misses are counted on ``mapping.misses``."""
    key = normalize_ndc(ndc)
    label = mapping.entries.get(key) if key else None
    if label is None:
        mapping.misses[key] += 1
    return label


# ---------------------------------------------------------------------------
# JSON-lines serialization


def visit_to_dict(visit: Visit) -> dict:
    if isinstance(visit.note, SoapNote):
        d = {
            "kind": "soap",
            "subjective": visit.note.subjective,
            "objective": visit.note.objective,
            "assessment": visit.note.assessment,
            "plan": visit.note.plan,
        }
    else:
        d = {
            "kind": "admission",
            "admission_id": visit.note.admission_id,
            "diagnoses": list(visit.note.diagnoses),
        }
    d["visit_index"] = visit.visit_index
    d["ground_truth"] = visit.ground_truth.sorted()
    return d


def visit_from_dict(d: dict, position: int) -> Visit:
    kind = d.get("kind")
    idx = int(d.get("visit_index", position))
    gt = DrugSet.of(d.get("ground_truth", []))
    if kind == "soap":
        note = SoapNote(
            d.get("subjective", "") or "",
            d.get("objective", "") or "",
            d.get("assessment", "") or "",
            d.get("plan", "") or "",
        )
    elif kind == "admission":
        note = Admission(str(d.get("admission_id", idx)), tuple(d.get("diagnoses", [])))
    else:
        raise CohortFormatError(f"unknown visit kind {kind!r}")
    return Visit(idx, note, gt)


def record_to_dict(record: PatientRecord) -> dict:
    return {"patient_id": record.patient_id, "visits": [visit_to_dict(v) for v in record.visits]}


def record_from_dict(d: dict) -> PatientRecord:
    try:
        pid = str(d["patient_id"])
        visits = tuple(visit_from_dict(v, i) for i, v in enumerate(d["visits"]))
    except (KeyError, TypeError) as exc:
        raise CohortFormatError(f"malformed patient record: {exc}") from exc
    return PatientRecord(pid, visits)


def write_cohort(cohort: Cohort, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in cohort:
            fh.write(json.dumps(record_to_dict(record), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def read_cohort(path: str | Path) -> Cohort:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(record_from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise CohortFormatError(f"{path}:{lineno}: {exc}") from exc
    return Cohort(tuple(records))

