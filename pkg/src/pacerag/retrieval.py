"""Similarity search over past cases and guideline text.

Dense search is exact: every query is scored against every stored unit
vector and the survivors of the threshold are sorted by score with ties
kept in insertion order. The lexical side offers BM25 and the bigram
Jaccard scorer with its mean-plus-spread filter used by the TreatRAG
baseline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import threading
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
import requests

from pacerag.cohort import Admission, Cohort, DrugSet, SoapNote, Visit

log = logging.getLogger(__name__)

FIELD_TAGS = ("subjective", "assessment", "diagnosis-list", "guideline")
DENSE_FORMAT = "pacerag-dense-v1"
SPARSE_FORMAT = "pacerag-sparse-v1"


class RetrievalError(Exception):
    pass


class EmbedderUnavailable(RetrievalError):
    pass


class DimensionMismatch(RetrievalError, ValueError):
    pass


class ZeroVector(RetrievalError, ValueError):
    pass


class EmptyIndex(RetrievalError):
    pass


class InvalidChunkParams(RetrievalError, ValueError):
    pass


class IndexFormatError(RetrievalError):
    pass


_TOKEN = re.compile(r"[a-z0-9]+(?:['\-][a-z0-9]+)*")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall((text or "").lower())


# ---------------------------------------------------------------------------
# Embedders


class Embedder(Protocol):
    name: str
    dim: int

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


def _unit_rows(mat: np.ndarray, dim: int) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != dim:
        raise DimensionMismatch(f"expected vectors of dim {dim}, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("embedding contains non-finite entries")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0):
        raise ZeroVector("embedder returned a zero vector")
    return mat / norms[:, None]


class HashingEmbedder:
    """Deterministic offline embedder.

    Each token maps to a standard-normal vector drawn from a generator
    seeded by ``sha256(seed:token)``; a text is the normalized sum of its
    token vectors. Shared vocabulary therefore yields high cosine, and the
    same text always yields the same vector on any machine.
    """

    def __init__(self, dim: int = 384, seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.name = f"hashing-{dim}-s{seed}"
        self._token_vector = lru_cache(maxsize=65536)(self._make_token_vector)

    def _make_token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(self.dim)
        vec.setflags(write=False)
        return vec

    def embed_one(self, text: str) -> np.ndarray:
        tokens = tokenize(text) or [text]
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._token_vector(tok)
        norm = np.linalg.norm(acc)
        if norm == 0:
            raise ZeroVector(f"text {text[:40]!r} embedded to the zero vector")
        return acc / norm

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed_one(t) for t in texts])


class HttpEmbedder:
    """Client for an embedding service.

    ``GET {base}/capabilities`` answers ``{"dim": n}`` and
    ``POST {base}/embed`` takes ``{"texts": [...]}`` and answers
    ``{"vectors": [[...], ...]}``.
    """

    def __init__(self, base_url: str, timeout: float = 30.0, max_parallel: int = 4,
                 batch_size: int = 64, session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.batch_size = batch_size
        self._session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max_parallel)
        self._dim: int | None = None
        self.name = f"http:{self.base_url}"

    @property
    def dim(self) -> int:
        if self._dim is None:
            try:
                r = self._session.get(f"{self.base_url}/capabilities", timeout=self.timeout)
                r.raise_for_status()
                self._dim = int(r.json()["dim"])
            except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
                raise EmbedderUnavailable(f"capabilities request failed: {exc}") from exc
        return self._dim

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        dim = self.dim
        out = []
        for start in range(0, len(texts), self.batch_size):
            chunk = list(texts[start:start + self.batch_size])
            with self._slots:
                try:
                    r = self._session.post(f"{self.base_url}/embed", json={"texts": chunk}, timeout=self.timeout)
                    r.raise_for_status()
                    vectors = r.json()["vectors"]
                except (requests.RequestException, ValueError, KeyError) as exc:
                    raise EmbedderUnavailable(f"embed request failed: {exc}") from exc
            if len(vectors) != len(chunk):
                raise EmbedderUnavailable(f"asked for {len(chunk)} vectors, got {len(vectors)}")
            out.append(_unit_rows(vectors, dim))
        return np.vstack(out) if out else np.zeros((0, dim))


class SentenceTransformerEmbedder:
    """Local sentence-transformers model, loaded on first use."""

    def __init__(self, model_name: str = "all-MiniLM-L6-v2"):
        self.model_name = model_name
        self.name = f"st:{model_name}"
        self._model = None

    def _load(self):
        if self._model is None:
            try:
                from sentence_transformers import SentenceTransformer
            except ImportError as exc:
                raise EmbedderUnavailable("sentence-transformers is not installed") from exc
            try:
                self._model = SentenceTransformer(self.model_name)
            except Exception as exc:  # model download or load failure
                raise EmbedderUnavailable(f"cannot load {self.model_name}: {exc}") from exc
        return self._model

    @property
    def dim(self) -> int:
        return int(self._load().get_sentence_embedding_dimension())

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        vecs = self._load().encode(list(texts), convert_to_numpy=True)
        return _unit_rows(vecs, self.dim)


def make_embedder(spec: str) -> Embedder:
    """``hashing[:dim[:seed]]``, ``http:<url>`` or ``st:<model name>``."""
    kind, _, rest = spec.partition(":")
    if kind == "hashing":
        parts = [p for p in rest.split(":") if p]
        dim = int(parts[0]) if parts else 384
        seed = int(parts[1]) if len(parts) > 1 else 0
        return HashingEmbedder(dim, seed)
    if kind == "http":
        return HttpEmbedder(rest)
    if kind == "st":
        return SentenceTransformerEmbedder(rest or "all-MiniLM-L6-v2")
    raise ValueError(f"unknown embedder spec {spec!r}")


def embed(text: str, embedder: Embedder) -> np.ndarray:
    if not text or not text.strip():
        raise ValueError("cannot embed empty text")
    return embedder.embed_batch([text])[0]


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite vector entries")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Index entries


@dataclass(frozen=True)
class IndexEntry:
    patient_id: str
    field_tag: str
    text: str
    associated_drugs: DrugSet = field(default_factory=DrugSet)
    prior_drugs: DrugSet = field(default_factory=DrugSet)
    visit_index: int = 0
    # Full note of the source visit, shown to the model next to the snippet.
    context: str = ""

    def __post_init__(self):
        if self.field_tag not in FIELD_TAGS:
            raise ValueError(f"unknown field tag {self.field_tag!r}")
        if not self.text.strip():
            raise ValueError("index entry text must be non-empty")

    @property
    def case_key(self) -> tuple[str, int]:
        return (self.patient_id, self.visit_index)

    @property
    def added_drugs(self) -> DrugSet:
        return DrugSet(self.associated_drugs - self.prior_drugs)

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "visit_index": self.visit_index,
            "field_tag": self.field_tag,
            "text": self.text,
            "associated_drugs": self.associated_drugs.sorted(),
            "prior_drugs": self.prior_drugs.sorted(),
            "context": self.context,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndexEntry":
        return cls(
            patient_id=str(d["patient_id"]),
            field_tag=d["field_tag"],
            text=d["text"],
            associated_drugs=DrugSet.of(d.get("associated_drugs", [])),
            prior_drugs=DrugSet.of(d.get("prior_drugs", [])),
            visit_index=int(d.get("visit_index", 0)),
            context=d.get("context", ""),
        )


@dataclass(frozen=True)
class RetrievalParams:
    k: int = 7
    tau: float = 0.9

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError("k must be >= 1")
        if not -1.0 <= float(self.tau) <= 1.0:
            raise ValueError("tau must lie in [-1, 1]")


@dataclass(frozen=True)
class RetrievedCase:
    entry: IndexEntry
    score: float

    def to_dict(self) -> dict:
        return {"score": round(self.score, 12), **self.entry.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievedCase":
        return cls(IndexEntry.from_dict(d), float(d["score"]))


def render_note(visit: Visit, include_plan: bool = True) -> str:
    note = visit.note
    if isinstance(note, SoapNote):
        parts = [f"Subjective: {note.subjective}", f"Objective: {note.objective}", f"Assessment: {note.assessment}"]
        if include_plan:
            parts.append(f"Plan: {note.plan}")
        return "\n".join(parts)
    text = f"Diagnoses: {', '.join(note.diagnoses)}"
    if include_plan:
        text += f"\nPrescriptions: {', '.join(visit.ground_truth.sorted())}"
    return text


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"[.;\n]", text or "") if s.strip()]


def build_pool_entries(pool: Cohort, scope: str = "latest", segmentation: str = "field") -> list[IndexEntry]:
    """Index entries for the retrieval pool.

    ``scope`` is ``latest`` (one visit per patient, the most recent) or
    ``all``. ``segmentation`` is ``field`` (one entry per Subjective,
    Assessment or diagnosis list) or ``sentence`` (one entry per sentence
    of those fields, or per diagnosis title).
    """
    if scope not in ("latest", "all"):
        raise ValueError(f"unknown scope {scope!r}")
    if segmentation not in ("field", "sentence"):
        raise ValueError(f"unknown segmentation {segmentation!r}")
    entries: list[IndexEntry] = []
    for record in pool:
        positions = [len(record.visits) - 1] if scope == "latest" else range(len(record.visits))
        for pos in positions:
            visit = record.visits[pos]
            prior = record.visits[pos - 1].ground_truth if pos > 0 else DrugSet()
            context = render_note(visit)
            if isinstance(visit.note, SoapNote):
                fields = [("subjective", visit.note.subjective), ("assessment", visit.note.assessment)]
                segments = [
                    (tag, seg)
                    for tag, text in fields
                    for seg in (split_sentences(text) if segmentation == "sentence" else [text.strip()])
                ]
            else:
                dx: Admission = visit.note
                if segmentation == "sentence":
                    segments = [("diagnosis-list", d.strip()) for d in dx.diagnoses]
                else:
                    segments = [("diagnosis-list", ", ".join(d.strip() for d in dx.diagnoses))]
            seen: set[tuple[str, str]] = set()
            for tag, seg in segments:
                if not seg or (tag, seg) in seen:
                    continue
                seen.add((tag, seg))
                entries.append(IndexEntry(record.patient_id, tag, seg, visit.ground_truth, prior,
                                          visit.visit_index, context))
    return entries


# ---------------------------------------------------------------------------
# Dense index


class DenseIndex:
    def __init__(self, entries: Sequence[IndexEntry], vectors: np.ndarray, embedder_name: str,
                 embedder: Embedder | None = None):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(entries) != vectors.shape[0]:
            raise IndexFormatError(f"{len(entries)} entries vs vectors of shape {vectors.shape}")
        self.entries = list(entries)
        self.vectors = vectors
        self.dim = vectors.shape[1]
        self.embedder_name = embedder_name
        self.embedder = embedder
        self._tags = np.array([e.field_tag for e in self.entries], dtype=object)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def build(cls, entries: Sequence[IndexEntry], embedder: Embedder) -> "DenseIndex":
        vectors = embedder.embed_batch([e.text for e in entries]) if entries else np.zeros((0, embedder.dim))
        return cls(entries, vectors, embedder.name, embedder)

    def search_vector(self, query: np.ndarray, params: RetrievalParams,
                      field_tags: Iterable[str] | None = None) -> list[RetrievedCase]:
        if not self.entries:
            raise EmptyIndex("dense index has no entries")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"query dim {q.shape} vs index dim {self.dim}")
        scores = np.clip(self.vectors @ q, -1.0, 1.0)
        mask = scores >= params.tau
        if field_tags is not None:
            mask &= np.isin(self._tags, list(field_tags))
        idx = np.flatnonzero(mask)
        # lexsort: last key is primary; the index itself breaks ties stably.
        order = idx[np.lexsort((idx, -scores[idx]))][: params.k]
        return [RetrievedCase(self.entries[i], float(scores[i])) for i in order]

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"format": DENSE_FORMAT, "dim": self.dim, "count": len(self.entries),
                    "embedder": self.embedder_name, "dtype": "float64"}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        np.save(d / "vectors.npy", self.vectors, allow_pickle=False)
        with open(d / "entries.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, embedder: Embedder | None = None) -> "DenseIndex":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
            vectors = np.load(d / "vectors.npy", allow_pickle=False)
            with open(d / "entries.jsonl", encoding="utf-8") as fh:
                entries = [IndexEntry.from_dict(json.loads(line)) for line in fh if line.strip()]
        except (OSError, ValueError, KeyError) as exc:
            raise IndexFormatError(f"cannot load dense index from {d}: {exc}") from exc
        if manifest.get("format") != DENSE_FORMAT:
            raise IndexFormatError(f"{d}: not a dense index ({manifest.get('format')!r})")
        if vectors.shape != (manifest["count"], manifest["dim"]) or len(entries) != manifest["count"]:
            raise IndexFormatError(f"{d}: manifest does not match stored data")
        if embedder is not None:
            if embedder.dim != manifest["dim"]:
                raise DimensionMismatch(f"embedder dim {embedder.dim} vs index dim {manifest['dim']}")
            if embedder.name != manifest["embedder"]:
                log.warning("index built with %s, queried with %s", manifest["embedder"], embedder.name)
        return cls(entries, vectors, manifest["embedder"], embedder)


def dense_retrieve(index: DenseIndex, query_text: str, params: RetrievalParams = RetrievalParams(),
                   field_tags: Iterable[str] | None = None) -> list[RetrievedCase]:
    if not index.entries:
        raise EmptyIndex("dense index has no entries")
    if index.embedder is None:
        raise EmbedderUnavailable("index was loaded without an embedder")
    return index.search_vector(embed(query_text, index.embedder), params, field_tags)


# ---------------------------------------------------------------------------
# BM25


class BM25Index:
    """Okapi BM25 with ``idf = ln((N - n + 0.5) / (n + 0.5) + 1)``.

    Each distinct query term contributes once; documents scoring zero are
    never returned.
    """

    def __init__(self, entries: Sequence[IndexEntry], k1: float = 1.2, b: float = 0.75):
        self.entries = list(entries)
        self.k1 = k1
        self.b = b
        self._tf = [Counter(tokenize(e.text)) for e in self.entries]
        self._len = np.array([sum(tf.values()) for tf in self._tf], dtype=np.float64)
        self._avgdl = float(self._len.mean()) if len(self._len) else 0.0
        df: Counter = Counter()
        for tf in self._tf:
            df.update(tf.keys())
        n = len(self.entries)
        self.idf = {t: math.log((n - c + 0.5) / (c + 0.5) + 1.0) for t, c in df.items()}

    def __len__(self) -> int:
        return len(self.entries)

    def scores(self, query_text: str) -> np.ndarray:
        out = np.zeros(len(self.entries))
        if self._avgdl == 0:
            return out
        for term in dict.fromkeys(tokenize(query_text)):
            idf = self.idf.get(term)
            if idf is None:
                continue
            for i, tf in enumerate(self._tf):
                f = tf.get(term, 0)
                if f:
                    denom = f + self.k1 * (1 - self.b + self.b * self._len[i] / self._avgdl)
                    out[i] += idf * f * (self.k1 + 1) / denom
        return out

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        manifest = {"format": SPARSE_FORMAT, "count": len(self.entries), "k1": self.k1, "b": self.b}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        with open(d / "entries.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "BM25Index":
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
            with open(d / "entries.jsonl", encoding="utf-8") as fh:
                entries = [IndexEntry.from_dict(json.loads(line)) for line in fh if line.strip()]
        except (OSError, ValueError, KeyError) as exc:
            raise IndexFormatError(f"cannot load sparse index from {d}: {exc}") from exc
        if manifest.get("format") != SPARSE_FORMAT:
            raise IndexFormatError(f"{d}: not a sparse index")
        return cls(entries, manifest["k1"], manifest["b"])


def sparse_retrieve(index: BM25Index, query_text: str, k: int = 7,
                    field_tags: Iterable[str] | None = None) -> list[RetrievedCase]:
    if not index.entries:
        raise EmptyIndex("sparse index has no entries")
    scores = index.scores(query_text)
    allowed = set(field_tags) if field_tags is not None else None
    idx = [i for i in range(len(scores))
           if scores[i] > 0 and (allowed is None or index.entries[i].field_tag in allowed)]
    idx.sort(key=lambda i: (-scores[i], i))
    return [RetrievedCase(index.entries[i], float(scores[i])) for i in idx[:k]]


# ---------------------------------------------------------------------------
# Bigram Jaccard and the adaptive filter


def word_bigrams(text: str) -> set[tuple[str, str]]:
    tokens = (text or "").lower().split()
    return set(zip(tokens, tokens[1:]))


def jaccard_bigram_similarity(a: str, b: str) -> float:
    ba, bb = word_bigrams(a), word_bigrams(b)
    union = ba | bb
    if not union:
        return 0.0
    return len(ba & bb) / len(union)


def adaptive_filter(scores: Sequence[float], spread: float = 1.5) -> tuple[float | None, list[int]]:
    """Keep positive scores at or above ``mean + spread * std``.

    Mean and population standard deviation are taken over the positive
    scores only. Survivor indices come back ranked by score, ties in input
    order. The threshold is ``None`` when no score is positive.
    """
    positive = [float(s) for s in scores if s > 0]
    if not positive:
        return None, []
    if min(positive) == max(positive):
        threshold = positive[0]
    else:
        mu = math.fsum(positive) / len(positive)
        sigma = math.sqrt(math.fsum((s - mu) ** 2 for s in positive) / len(positive))
        threshold = mu + spread * sigma
    survivors = [i for i, s in enumerate(scores) if s > 0 and s >= threshold]
    survivors.sort(key=lambda i: (-scores[i], i))
    return threshold, survivors


# ---------------------------------------------------------------------------
# Guideline chunks


@dataclass(frozen=True)
class GuidelineChunk:
    doc_id: str
    chunk_text: str
    char_span: tuple[int, int]


def chunk_guidelines(doc: str, size: int = 1200, overlap: int = 200, doc_id: str = "guideline") -> list[GuidelineChunk]:
    if size < 1 or overlap < 0 or overlap >= size:
        raise InvalidChunkParams(f"need 0 <= overlap < size, got size={size} overlap={overlap}")
    chunks: list[GuidelineChunk] = []
    stride = size - overlap
    start = 0
    while start < len(doc):
        end = min(start + size, len(doc))
        chunks.append(GuidelineChunk(doc_id, doc[start:end], (start, end)))
        if end == len(doc):
            break
        start += stride
    return chunks


def reassemble_chunks(chunks: Sequence[GuidelineChunk]) -> str:
    out = ""
    for c in chunks:
        start, _ = c.char_span
        out += c.chunk_text[len(out) - start:]
    return out


def guideline_entries(chunks: Sequence[GuidelineChunk]) -> list[IndexEntry]:
    return [
        IndexEntry(c.doc_id, "guideline", c.chunk_text, visit_index=i, context=f"{c.char_span[0]}-{c.char_span[1]}")
        for i, c in enumerate(chunks)
        if c.chunk_text.strip()
    ]
