from __future__ import annotations

import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import adaptive_oracle, bm25_oracle, dense_oracle
from pacerag.cohort import DrugSet
from pacerag.retrieval import (
    BM25Index,
    DenseIndex,
    DimensionMismatch,
    EmbedderUnavailable,
    EmptyIndex,
    HashingEmbedder,
    HttpEmbedder,
    IndexEntry,
    IndexFormatError,
    InvalidChunkParams,
    RetrievalParams,
    ZeroVector,
    adaptive_filter,
    build_pool_entries,
    chunk_guidelines,
    cosine_similarity,
    dense_retrieve,
    jaccard_bigram_similarity,
    make_embedder,
    reassemble_chunks,
    sparse_retrieve,
    tokenize,
)

TAGS = ("subjective", "assessment")


def _entries(texts, tags=None):
    tags = tags or [TAGS[i % 2] for i in range(len(texts))]
    return [IndexEntry(f"P{i}", tag, t, DrugSet.of([f"d{i}"])) for i, (t, tag) in enumerate(zip(texts, tags))]


def _random_index(rng, n, dim):
    vecs = rng.standard_normal((n, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    tags = [TAGS[int(x)] for x in rng.integers(0, 2, n)]
    entries = [IndexEntry(f"P{i}", tags[i], f"text {i}") for i in range(n)]
    return DenseIndex(entries, vecs, "random"), vecs, tags


# -- cosine -------------------------------------------------------------------------


def test_cosine_basic_and_errors():
    assert cosine_similarity([1, 0], [0, 2]) == 0.0
    assert cosine_similarity([1, 1], [2, 2]) == pytest.approx(1.0)
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 0], [1, 0, 0])
    with pytest.raises(ValueError):
        cosine_similarity([np.nan, 0], [1, 0])


# -- dense search vs brute force ------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 12), tau=st.floats(-1, 1),
       tagset=st.sampled_from([None, ("subjective",), ("assessment",), TAGS]))
def test_dense_search_matches_oracle(seed, k, tau, tagset):
    rng = np.random.default_rng(seed)
    index, vecs, tags = _random_index(rng, 25, 8)
    q = rng.standard_normal(8)
    q /= np.linalg.norm(q)
    got = [(int(c.entry.patient_id[1:]), c.score) for c in index.search_vector(q, RetrievalParams(k, tau), tagset)]
    want = dense_oracle(vecs.tolist(), tags, q.tolist(), k, tau, tagset)
    assert [i for i, _ in got] == [i for i, _ in want]
    assert np.allclose([s for _, s in got], [s for _, s in want], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 10), tau=st.floats(-1, 0.99))
def test_dense_monotone_in_k_and_tau(seed, k, tau):
    rng = np.random.default_rng(seed)
    index, _, _ = _random_index(rng, 20, 6)
    q = rng.standard_normal(6)
    q /= np.linalg.norm(q)
    base = [c.entry.patient_id for c in index.search_vector(q, RetrievalParams(k, tau))]
    more = [c.entry.patient_id for c in index.search_vector(q, RetrievalParams(k + 1, tau))]
    strict = [c.entry.patient_id for c in index.search_vector(q, RetrievalParams(k, min(1.0, tau + 0.2)))]
    assert more[: len(base)] == base
    assert set(strict) <= set(base) or len(base) == k


def test_dense_ties_broken_by_position():
    vecs = np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]])
    index = DenseIndex(_entries(["a", "b", "c", "d"]), vecs, "fixed")
    assert [c.entry.text for c in index.search_vector(np.array([1.0, 0.0]), RetrievalParams(2, 0.5))] == ["a", "b"]


def test_dense_errors():
    with pytest.raises(EmptyIndex):
        DenseIndex([], np.zeros((0, 4)), "x").search_vector(np.ones(4), RetrievalParams())
    index = DenseIndex(_entries(["a"]), np.array([[1.0, 0.0]]), "x")
    with pytest.raises(DimensionMismatch):
        index.search_vector(np.ones(3), RetrievalParams())
    with pytest.raises(EmbedderUnavailable):
        dense_retrieve(index, "a")
    with pytest.raises(ValueError):
        RetrievalParams(0, 0.5)
    with pytest.raises(ValueError):
        RetrievalParams(3, 1.5)


def test_dense_text_retrieval_finds_identical_text():
    emb = HashingEmbedder(64, 0)
    index = DenseIndex.build(_entries(["severe resting tremor", "difficulty falling asleep", "no complaints"]), emb)
    hits = dense_retrieve(index, "Difficulty falling asleep", RetrievalParams(1, 0.9))
    assert [h.entry.text for h in hits] == ["difficulty falling asleep"]
    assert hits[0].score == pytest.approx(1.0)


# -- persistence ----------------------------------------------------------------------


def _digest(directory):
    h = hashlib.sha256()
    for name in ("manifest.json", "vectors.npy", "entries.jsonl"):
        h.update((directory / name).read_bytes())
    return h.hexdigest()


def test_dense_save_load_is_bit_exact(tmp_path):
    emb = HashingEmbedder(32, 1)
    index = DenseIndex.build(_entries(["alpha beta", "gamma", "delta epsilon"]), emb)
    index.save(tmp_path / "a")
    loaded = DenseIndex.load(tmp_path / "a", emb)
    assert np.array_equal(loaded.vectors, index.vectors) and loaded.entries == index.entries
    loaded.save(tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    q = emb.embed_one("gamma")
    assert index.search_vector(q, RetrievalParams(3, -1)) == loaded.search_vector(q, RetrievalParams(3, -1))


def test_dense_load_rejects_mismatch(tmp_path):
    emb = HashingEmbedder(16)
    DenseIndex.build(_entries(["a b"]), emb).save(tmp_path)
    with pytest.raises(DimensionMismatch):
        DenseIndex.load(tmp_path, HashingEmbedder(8))
    (tmp_path / "manifest.json").write_text('{"format": "other"}')
    with pytest.raises(IndexFormatError):
        DenseIndex.load(tmp_path)
    with pytest.raises(IndexFormatError):
        DenseIndex.load(tmp_path / "missing")


def test_hashing_embedder_is_stable():
    a = HashingEmbedder(16, 0).embed_one("tremor")
    b = HashingEmbedder(16, 0).embed_one("Tremor!")
    assert np.array_equal(a, b) and np.linalg.norm(a) == pytest.approx(1.0)
    assert not np.array_equal(a, HashingEmbedder(16, 1).embed_one("tremor"))


def test_make_embedder_specs():
    e = make_embedder("hashing:32:5")
    assert (e.dim, e.seed) == (32, 5)
    assert isinstance(make_embedder("http:http://x"), HttpEmbedder)
    with pytest.raises(ValueError):
        make_embedder("word2vec")


# -- HTTP embedder -----------------------------------------------------------------------


def test_http_embedder(http_stub):
    http_stub.responses += [(200, {"dim": 2}), (200, {"vectors": [[3, 4], [0, 2]]})]
    emb = HttpEmbedder(http_stub.url)
    out = emb.embed_batch(["a", "b"])
    assert np.allclose(out, [[0.6, 0.8], [0, 1]])
    assert http_stub.requests[0]["path"] == "/capabilities"
    assert http_stub.requests[1]["body"] == {"texts": ["a", "b"]}


def test_http_embedder_rejects_wrong_dim(http_stub):
    http_stub.responses += [(200, {"dim": 3}), (200, {"vectors": [[1, 0]]})]
    with pytest.raises(DimensionMismatch):
        HttpEmbedder(http_stub.url).embed_batch(["a"])


def test_http_embedder_unavailable(http_stub):
    http_stub.default = (500, {"error": "x"})
    with pytest.raises(EmbedderUnavailable):
        HttpEmbedder(http_stub.url).embed_batch(["a"])


# -- pool entries ----------------------------------------------------------------------------


def test_pool_entries_field_and_sentence(synth_world):
    pool = synth_world[2]
    field = build_pool_entries(pool, "latest", "field")
    assert {e.field_tag for e in field} == {"subjective", "assessment"}
    assert len({e.patient_id for e in field}) == len(pool)
    sent = build_pool_entries(pool, "latest", "sentence")
    assert len(sent) >= len(field)
    rec = pool.patients[0]
    e = next(x for x in field if x.patient_id == rec.patient_id)
    assert e.associated_drugs == rec.visits[-1].ground_truth
    assert e.prior_drugs == (rec.visits[-2].ground_truth if len(rec.visits) > 1 else DrugSet())
    everything = build_pool_entries(pool, "all", "field")
    assert len({e.case_key for e in everything}) == pool.n_visits
    with pytest.raises(ValueError):
        build_pool_entries(pool, "some")


# -- BM25 ------------------------------------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(docs=st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=8), min_size=1, max_size=8),
       query=st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=4))
def test_bm25_matches_oracle(docs, query):
    index = BM25Index(_entries([" ".join(d) for d in docs]))
    assert np.allclose(index.scores(" ".join(query)), bm25_oracle(docs, query), atol=1e-12)


def test_bm25_retrieve_and_persist(tmp_path):
    index = BM25Index(_entries(["tremor hand tremor", "sleep trouble", "hand pain"]))
    hits = sparse_retrieve(index, "tremor hand", k=5)
    assert [h.entry.text for h in hits] == ["tremor hand tremor", "hand pain"]
    assert sparse_retrieve(index, "zzz") == []
    index.save(tmp_path)
    assert np.array_equal(BM25Index.load(tmp_path).scores("hand"), index.scores("hand"))
    with pytest.raises(EmptyIndex):
        sparse_retrieve(BM25Index([]), "x")


def test_tokenize_keeps_hyphenated_words():
    assert tokenize("Peak-dose dyskinesia, 2 legs") == ["peak-dose", "dyskinesia", "2", "legs"]


# -- Jaccard and the adaptive filter -------------------------------------------------------------


def test_jaccard_bigram_examples():
    assert jaccard_bigram_similarity("a b c", "a b c") == 1.0
    assert jaccard_bigram_similarity("a b c", "b c d") == pytest.approx(1 / 3)
    assert jaccard_bigram_similarity("a", "a") == 0.0


@settings(max_examples=80)
@given(st.lists(st.one_of(st.just(0.0), st.floats(0, 1)), max_size=15))
def test_adaptive_filter_matches_oracle(scores):
    thr, keep = adaptive_filter(scores)
    othr, okeep = adaptive_oracle(scores)
    assert keep == okeep
    assert (thr is None) == (othr is None)
    if thr is not None:
        assert thr == pytest.approx(othr, abs=1e-12)


def test_adaptive_filter_examples():
    # Positive scores 0.1, 0.2, 0.9: mean 0.4, population std 0.3559; threshold 0.9339 (numpy).
    thr, keep = adaptive_filter([0.1, 0.0, 0.2, 0.9])
    assert thr == pytest.approx(0.9338539126015655) and keep == []
    assert adaptive_filter([0.5, 0.5, 0.0]) == (0.5, [0, 1])
    assert adaptive_filter([0.0, -1.0]) == (None, [])


# -- guideline chunking --------------------------------------------------------------------------


def test_chunking_default_size_and_overlap():
    # Reference value: guideline chunks of 1200 characters with 200 characters of overlap.
    doc = "".join(chr(97 + i % 26) for i in range(3000))
    chunks = chunk_guidelines(doc)
    assert [c.char_span for c in chunks] == [(0, 1200), (1000, 2200), (2000, 3000)]
    assert chunks[0].chunk_text[-200:] == chunks[1].chunk_text[:200]


@given(st.text(max_size=300), st.integers(1, 60), st.integers(0, 59))
def test_chunks_reassemble(doc, size, overlap):
    if overlap >= size:
        with pytest.raises(InvalidChunkParams):
            chunk_guidelines(doc, size, overlap)
        return
    chunks = chunk_guidelines(doc, size, overlap)
    assert reassemble_chunks(chunks) == doc
    assert all(len(c.chunk_text) <= size for c in chunks)
