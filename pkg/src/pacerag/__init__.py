"""Patient-aware, focus-driven prescription recommendation with retrieval augmentation."""

from pacerag.cohort import (
    Admission,
    Cohort,
    DrugSet,
    PatientRecord,
    SoapNote,
    Visit,
    canonicalize_drug,
)

__all__ = [
    "Admission",
    "Cohort",
    "DrugSet",
    "PatientRecord",
    "SoapNote",
    "Visit",
    "canonicalize_drug",
]

__version__ = "0.1.0"
