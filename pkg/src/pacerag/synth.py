"""Deterministic synthetic cohorts with a known symptom -> drug oracle.

Each patient carries a standing regimen. At every visit some acute
symptoms may be sampled; their oracle drugs are prescribed at that visit
and (by default) stay in the regimen afterwards. The ground truth at a
visit is therefore ``regimen ∪ oracle(acute symptoms)``, and the symptom
phrases appear verbatim in the Subjective text (or the diagnosis list).
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from pacerag.cohort import (
    Admission,
    Cohort,
    CohortError,
    DrugSet,
    PatientRecord,
    SoapNote,
    Visit,
    canonicalize_drug,
)


class InvalidSynthConfig(CohortError, ValueError):
    pass


@dataclass(frozen=True)
class Symptom:
    phrase: str
    drugs: tuple[str, ...]
    # What an uninformed prescriber would reach for; may miss the oracle drug.
    guesses: tuple[str, ...] = ()


@dataclass(frozen=True)
class Regimen:
    assessment: str
    base: tuple[str, ...]
    optional: tuple[str, ...] = ()


@dataclass(frozen=True)
class SynthConfig:
    symptoms: tuple[Symptom, ...]
    regimens: tuple[Regimen, ...]
    stable_phrases: tuple[str, ...]
    objective_phrases: tuple[str, ...] = ("None",)
    flavor: str = "soap"
    n_patients: int = 200
    min_visits: int = 3
    max_visits: int = 7
    acute_rate: float = 0.35
    second_symptom_rate: float = 0.15
    optional_rate: float = 0.35
    persist_additions: bool = True
    id_prefix: str = "P"

    def validate(self) -> None:
        if self.flavor not in ("soap", "diagnosis"):
            raise InvalidSynthConfig(f"unknown flavor {self.flavor!r}")
        if self.n_patients < 1:
            raise InvalidSynthConfig("n_patients must be >= 1")
        if not 1 <= self.min_visits <= self.max_visits:
            raise InvalidSynthConfig("need 1 <= min_visits <= max_visits")
        for name in ("acute_rate", "second_symptom_rate", "optional_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidSynthConfig(f"{name} must lie in [0, 1]")
        if not self.symptoms or not self.regimens or not self.stable_phrases:
            raise InvalidSynthConfig("symptoms, regimens and stable_phrases must be non-empty")
        phrases = [s.phrase for s in self.symptoms]
        if len({p.casefold() for p in phrases}) != len(phrases):
            raise InvalidSynthConfig("duplicate symptom phrases")
        for s in self.symptoms:
            if not s.phrase.strip() or not s.drugs:
                raise InvalidSynthConfig(f"symptom {s.phrase!r} needs a phrase and at least one drug")
            others = [p for p in phrases if p is not s.phrase]
            if any(s.phrase.casefold() in o.casefold() for o in others):
                raise InvalidSynthConfig(f"symptom {s.phrase!r} is a substring of another symptom")
            filler = list(self.stable_phrases) + list(self.objective_phrases)
            filler += [r.assessment for r in self.regimens]
            if any(s.phrase.casefold() in f.casefold() for f in filler):
                raise InvalidSynthConfig(f"symptom {s.phrase!r} occurs inside filler text")
        for r in self.regimens:
            if not r.base:
                raise InvalidSynthConfig(f"regimen {r.assessment!r} has an empty base")
        try:
            for s in self.symptoms:
                [canonicalize_drug(d) for d in s.drugs + s.guesses]
            for r in self.regimens:
                [canonicalize_drug(d) for d in r.base + r.optional]
        except CohortError as exc:
            raise InvalidSynthConfig(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        try:
            d = dict(d)
            d["symptoms"] = tuple(
                Symptom(s["phrase"], tuple(s["drugs"]), tuple(s.get("guesses", ()))) for s in d["symptoms"]
            )
            d["regimens"] = tuple(
                Regimen(r["assessment"], tuple(r["base"]), tuple(r.get("optional", ()))) for r in d["regimens"]
            )
            for key in ("stable_phrases", "objective_phrases"):
                if key in d:
                    d[key] = tuple(d[key])
            cfg = cls(**d)
        except (KeyError, TypeError) as exc:
            raise InvalidSynthConfig(f"malformed synthetic config: {exc}") from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "SynthConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise InvalidSynthConfig(f"{path}: {exc}") from exc


@dataclass
class SymptomDrugOracle:
    symptom_drugs: dict[str, DrugSet]
    guesses: dict[str, tuple[str, ...]]
    visit_symptoms: dict[tuple[str, int], tuple[str, ...]] = field(default_factory=dict)

    def drugs_for(self, phrases) -> DrugSet:
        out: set[str] = set()
        for p in phrases:
            out |= self.symptom_drugs[p]
        return DrugSet(out)

    def symptoms_at(self, patient_id: str, visit_index: int) -> tuple[str, ...]:
        return self.visit_symptoms.get((patient_id, visit_index), ())

    def to_dict(self) -> dict:
        return {
            "symptom_drugs": {k: v.sorted() for k, v in sorted(self.symptom_drugs.items())},
            "guesses": {k: list(v) for k, v in sorted(self.guesses.items())},
            "visit_symptoms": [
                {"patient_id": pid, "visit_index": idx, "symptoms": list(s)}
                for (pid, idx), s in sorted(self.visit_symptoms.items())
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SymptomDrugOracle":
        return cls(
            {k: DrugSet.of(v) for k, v in d["symptom_drugs"].items()},
            {k: tuple(v) for k, v in d.get("guesses", {}).items()},
            {(r["patient_id"], int(r["visit_index"])): tuple(r["symptoms"]) for r in d.get("visit_symptoms", [])},
        )


def default_synth_config(**overrides) -> SynthConfig:
    """A Parkinson's-flavoured configuration using real ingredient names."""
    symptoms = (
        Symptom("Visual hallucinations at night", ("Quetiapine",), ("Quetiapine", "Risperidone")),
        Symptom("Depressed mood most days", ("Escitalopram",), ("Escitalopram", "Sertraline HCl")),
        Symptom("Difficulty falling asleep", ("Trazodone HCl",), ("Trazodone HCl", "Agomelatine")),
        Symptom("Memory decline noticed by family", ("Donepezil",), ("Donepezil", "Memantine HCl")),
        Symptom("Peak-dose dyskinesia in both legs", ("Amantadine sulfate",), ("Amantadine sulfate", "Clozapine")),
        Symptom("Wearing-off before the next dose", ("Entacapone",), ("Opicapone", "Pramipexole")),
        Symptom("Severe resting tremor in the right hand", ("Trihexyphenidyl HCl",), ("Levodopa", "Pramipexole")),
        Symptom("Anxiety and inner restlessness", ("Paroxetine",), ("Sertraline HCl", "Bupropion HCl")),
        Symptom("Frequent freezing of gait", ("Safinamide mesilate",), ("Rasagiline", "Levodopa")),
    )
    regimens = (
        Regimen("Idiopathic Parkinson's disease, tremor-dominant type",
                ("Levodopa", "Benserazide HCl"), ("Trihexyphenidyl HCl", "Pramipexole")),
        Regimen("Idiopathic Parkinson's disease, akinetic-rigid type",
                ("Levodopa", "Carbidopa"), ("Ropinirole", "Rasagiline")),
        Regimen("Early Parkinson's disease", ("Rasagiline",), ("Pramipexole", "Ropinirole")),
        Regimen("Parkinson's disease with motor fluctuations",
                ("Levodopa", "Carbidopa", "Entacapone"), ("Opicapone", "Amantadine sulfate")),
        Regimen("Atypical parkinsonism, MSA possible", ("Amantadine sulfate",), ("Levodopa",)),
        Regimen("Vascular parkinsonism", ("Levodopa", "Benserazide HCl"), ("Rivastigmine",)),
    )
    stable = (
        "Feeling better overall",
        "No new complaints today",
        "Condition is stable since the last visit",
        "Test results explained",
        "Walking has improved a little",
        "Stopped drinking coffee in the evening",
        "Family reports no change",
    )
    objective = ("None", "Tandem gait: intact", "Bradykinesia: mild", "Rigidity: equivocal")
    cfg = SynthConfig(symptoms, regimens, stable, objective)
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = SynthConfig.from_dict(d)
    cfg.validate()
    return cfg


def _display(names) -> list[str]:
    return sorted(names, key=canonicalize_drug)


def generate_synthetic_cohort(config: SynthConfig, seed: int) -> tuple[Cohort, SymptomDrugOracle]:
    config.validate()
    rng = random.Random(seed)
    oracle = SymptomDrugOracle(
        {s.phrase: DrugSet.of(s.drugs) for s in config.symptoms},
        {s.phrase: tuple(s.guesses) for s in config.symptoms},
    )
    width = len(str(config.n_patients))
    records = []
    for i in range(config.n_patients):
        pid = f"{config.id_prefix}{i + 1:0{width}d}"
        regimen = rng.choice(config.regimens)
        standing = list(regimen.base) + [d for d in regimen.optional if rng.random() < config.optional_rate]
        stage = rng.randint(1, 2)
        n_visits = rng.randint(config.min_visits, config.max_visits)
        visits = []
        for t in range(n_visits):
            if t and rng.random() < 0.3:
                stage = min(stage + 1, 5)
            acute: list[Symptom] = []
            if rng.random() < config.acute_rate:
                acute.append(rng.choice(config.symptoms))
                if rng.random() < config.second_symptom_rate:
                    rest = [s for s in config.symptoms if s not in acute]
                    acute.append(rng.choice(rest))
            added = [d for s in acute for d in s.drugs]
            prescribed = list(dict.fromkeys(standing + added))
            gt = DrugSet.of(prescribed)
            if config.persist_additions:
                standing = list(dict.fromkeys(standing + added))

            phrases = tuple(s.phrase for s in acute)
            oracle.visit_symptoms[(pid, t)] = phrases
            fillers = rng.sample(config.stable_phrases, 1 if acute else rng.randint(1, 2))
            assessment = f"{regimen.assessment}, H&Y stage {stage}"
            if config.flavor == "soap":
                subjective = ". ".join(list(phrases) + fillers) + "."
                plan = ", ".join(_display(dict.fromkeys(prescribed)))
                note = SoapNote(subjective, rng.choice(config.objective_phrases), assessment, plan)
            else:
                note = Admission(f"{pid}-A{t + 1}", (assessment,) + phrases)
            visits.append(Visit(t, note, gt))
        records.append(PatientRecord(pid, tuple(visits)))
    return Cohort(tuple(records)), oracle


def synthetic_guidelines(config: SynthConfig) -> str:
    """A guideline document whose recommendations follow the generic guesses."""
    paras = [
        "Clinical practice guideline for the medical management of Parkinson's disease. "
        "These recommendations summarise first-line options and are not patient specific."
    ]
    for s in config.symptoms:
        first = s.guesses[0] if s.guesses else s.drugs[0]
        paras.append(
            f"Section: {s.phrase.lower()}. RECOMMENDATION: For {s.phrase.lower()}, use {first}. "
            "Reassess response at the next follow-up visit and consider dose adjustment if symptoms persist."
        )
    for r in config.regimens:
        paras.append(
            f"Section: {r.assessment.lower()}. Maintain established dopaminergic therapy "
            f"({', '.join(r.base)}) when the patient is stable."
        )
    return "\n\n".join(paras) + "\n"
