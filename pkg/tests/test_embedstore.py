import numpy as np
import pytest

from trialgen.corpus import Criterion, Exemplar, TrialDocument
from trialgen.embedstore import (
    KnowledgeStore,
    StaleStoreError,
    StoreEntry,
    TrialEmbedding,
    build_store,
    encode_setup,
    retrieve,
)
from trialgen.model import encoder_version


def _unit(vec):
    v = np.asarray(vec, dtype=np.float32)
    return v / np.linalg.norm(v)


def _entry(store, trial_id, vec, text="age is above 18 yrs old"):
    key = TrialEmbedding(_unit(vec), trial_id, store.encoder_version)
    value = Exemplar(
        chain=[Criterion("bmi above 30 kg/m2", "inclusion")],
        instruction="age",
        target=Criterion(text, "inclusion", "age"),
    )
    return StoreEntry(key, value, trial_id)


def test_encode_setup_normalized_and_deterministic(tiny_world):
    state, vocab = tiny_world["state"], tiny_world["vocab"]
    trial = tiny_world["trials"][0]
    a = encode_setup(state, vocab, trial)
    b = encode_setup(state, vocab, trial)
    assert abs(float(np.linalg.norm(a.vector)) - 1.0) < 1e-6
    assert np.array_equal(a.vector, b.vector)
    assert a.encoder_version == encoder_version(state)


def test_encode_setup_separates_unrelated_setups(tiny_world):
    state, vocab = tiny_world["state"], tiny_world["vocab"]
    a = TrialDocument("A", "A Phase 2 Study of Velotinib in Chronic Heart Failure",
                      "Chronic Heart Failure", "Velotinib tablets", [
                          Criterion("x", "inclusion")], [])
    b = TrialDocument("B", "Totally unrelated words here",
                      "Plaque Psoriasis", "Marizumab infusion", [
                          Criterion("x", "inclusion")], [])
    ha = encode_setup(state, vocab, a)
    hb = encode_setup(state, vocab, b)
    self_sim = float(ha.vector @ ha.vector)
    cross = float(ha.vector @ hb.vector)
    assert self_sim == pytest.approx(1.0, abs=1e-6)
    assert cross < self_sim


def test_build_store_counts(tiny_world):
    state, vocab = tiny_world["state"], tiny_world["vocab"]
    trials = tiny_world["trials"][:3]
    store = build_store(trials, state, vocab, chain_len=2)
    expected = sum(
        1 for t in trials for c in t.criteria
        if c.attribute in state.registry
    )
    assert len(store) == expected
    for e in store.entries:
        assert e.value.instruction is not None
        assert e.value.target is not None
        assert len(e.value.chain) <= 2


def test_upsert_remove_and_visibility():
    store = KnowledgeStore(dim=4, encoder_version="v0")
    e1 = _entry(store, "T1", [1, 0, 0, 0])
    e2 = _entry(store, "T2", [0, 1, 0, 0])
    store.upsert(e1)
    store.upsert(e2)
    assert len(store) == 2

    hits = retrieve(store, e1.key, k=1)
    assert hits[0].trial_id == "T1"

    # replacing the same (trial, target) key keeps one entry
    store.upsert(_entry(store, "T1", [0.9, 0.1, 0, 0]))
    assert len(store) == 2

    # upsert -> retrieve with the upserted key returns that entry first
    e3 = _entry(store, "T3", [0, 0, 1, 0])
    store.upsert(e3)
    assert retrieve(store, e3.key, k=1)[0].trial_id == "T3"

    assert store.remove("T1") == 1
    assert all(e.trial_id != "T1" for e in retrieve(store, e1.key, k=3))


def test_exclusion_of_own_trial():
    store = KnowledgeStore(dim=3, encoder_version="v0")
    e = _entry(store, "T1", [1, 0, 0])
    store.upsert(e)
    assert retrieve(store, e.key, k=1, exclude_trial_id="T1") == []
    assert retrieve(store, e.key, k=1)[0].trial_id == "T1"


def test_retrieve_matches_bruteforce_oracle():
    rng = np.random.default_rng(99)
    store = KnowledgeStore(dim=16, encoder_version="v0")
    vecs = []
    for i in range(1000):
        v = _unit(rng.normal(size=16))
        vecs.append(v)
        store.upsert(_entry(store, f"T{i}", v))
    for qi in range(100):
        q = _unit(rng.normal(size=16))
        got = [e.trial_id for e in retrieve(store, q, k=5)]
        # independent brute force: python loop, sort by (-cos, counter)
        sims = []
        for e in store.entries:
            num = sum(float(a) * float(b) for a, b in zip(e.key.vector, q))
            den = (sum(float(a) ** 2 for a in e.key.vector) ** 0.5
                   * sum(float(b) ** 2 for b in q) ** 0.5)
            sims.append((-(num / den), e.counter, e.trial_id))
        expected = [tid for _, _, tid in sorted(sims)[:5]]
        assert got == expected, f"query {qi} diverged"


def test_retrieve_monotone_similarity():
    rng = np.random.default_rng(3)
    store = KnowledgeStore(dim=8, encoder_version="v0")
    for i in range(50):
        store.upsert(_entry(store, f"T{i}", rng.normal(size=8)))
    q = _unit(rng.normal(size=8))
    hits = retrieve(store, q, k=10)
    sims = [float(e.key.vector @ q) for e in hits]
    assert all(a >= b - 1e-9 for a, b in zip(sims, sims[1:]))


def test_tie_break_by_insertion_counter():
    store = KnowledgeStore(dim=3, encoder_version="v0")
    store.upsert(_entry(store, "T1", [1, 0, 0], text="first"))
    store.upsert(_entry(store, "T2", [1, 0, 0], text="second"))
    hits = retrieve(store, _unit([1, 0, 0]), k=2)
    assert [h.trial_id for h in hits] == ["T1", "T2"]


def test_persist_load_roundtrip(tmp_path, tiny_world):
    state, vocab = tiny_world["state"], tiny_world["vocab"]
    store = build_store(tiny_world["trials"][:8], state, vocab)
    assert len(store) >= 50
    path = tmp_path / "store.jsonl"
    store.persist(path)
    back = KnowledgeStore.load(path)
    assert len(back) == len(store)
    assert back.encoder_version == store.encoder_version
    for a, b in zip(store.entries, back.entries):
        assert a.trial_id == b.trial_id and a.counter == b.counter
        assert np.array_equal(a.key.vector, b.key.vector)
        assert a.value.instruction == b.value.instruction
        assert a.value.target.text == b.value.target.text
        assert [c.text for c in a.value.chain] == [c.text for c in b.value.chain]


def test_load_rejects_stale_encoder(tmp_path):
    store = KnowledgeStore(dim=3, encoder_version="v0")
    store.upsert(_entry(store, "T1", [1, 0, 0]))
    path = tmp_path / "store.jsonl"
    store.persist(path)
    with pytest.raises(StaleStoreError):
        KnowledgeStore.load(path, expected_encoder_version="v1")
    KnowledgeStore.load(path, expected_encoder_version="v0")


def test_empty_store_and_bad_k():
    store = KnowledgeStore(dim=3, encoder_version="v0")
    assert retrieve(store, _unit([1, 0, 0]), k=4) == []
    with pytest.raises(ValueError):
        retrieve(store, _unit([1, 0, 0]), k=0)
    with pytest.raises(ValueError):
        build_store([], None, None)
