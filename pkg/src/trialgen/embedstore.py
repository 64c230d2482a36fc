"""Editable exemplar store: setup embeddings as keys, demonstrations as values.

Keys are mean-pooled final-layer hidden states of the backbone over the setup
tokens, L2-normalized. Retrieval is an exact cosine scan; edits take effect
immediately and never require retraining. Keys are stamped with the backbone
fingerprint so stale stores are rejected after retraining.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .corpus import Criterion, Exemplar, TrialDocument
from .model import ModelState, encoder_version
from .textproto import Vocabulary, render_setup


class StaleStoreError(ValueError):
    pass


@dataclass
class TrialEmbedding:
    vector: np.ndarray  # unit-norm float32, d = backbone hidden size
    trial_id: str
    encoder_version: str


@dataclass
class StoreEntry:
    key: TrialEmbedding
    value: Exemplar
    trial_id: str
    counter: int = 0


def encode_ids(state: ModelState, ids) -> np.ndarray:
    """Mean of final-layer hidden states over ``ids``, L2-normalized."""
    if len(ids) == 0:
        raise ValueError("cannot encode an empty token sequence")
    with torch.no_grad():
        h, _ = state.backbone.hidden_states(torch.tensor(ids, dtype=torch.long))
        pooled = h[0].mean(dim=0)
        vec = pooled.numpy().astype(np.float32)
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # degenerate but legal (e.g. zeroed model); keep a deterministic key
        vec = np.zeros_like(vec)
        vec[0] = 1.0
        return vec
    return vec / norm


def encode_setup(state: ModelState, vocab: Vocabulary,
                 trial: TrialDocument) -> TrialEmbedding:
    tokens = render_setup(trial)
    if not trial.title and not trial.disease and not trial.treatment:
        raise ValueError("empty trial setup")
    vec = encode_ids(state, vocab.encode_tokens(tokens))
    return TrialEmbedding(vec, trial.trial_id, encoder_version(state))


class KnowledgeStore:
    """(embedding key -> exemplar value) map with exact top-k retrieval."""

    def __init__(self, dim: int, encoder_version: str):
        self.dim = dim
        self.encoder_version = encoder_version
        self.entries: list = []
        self._counter = 0

    def __len__(self) -> int:
        return len(self.entries)

    def _entry_key(self, entry: StoreEntry) -> tuple:
        return (entry.trial_id, entry.value.target.text if entry.value.target else "")

    def upsert(self, entry: StoreEntry) -> None:
        if entry.key.vector.shape != (self.dim,):
            raise ValueError("key dimension mismatch")
        if entry.key.encoder_version != self.encoder_version:
            raise StaleStoreError(
                f"entry encoded with {entry.key.encoder_version}, "
                f"store expects {self.encoder_version}"
            )
        entry.counter = self._counter
        self._counter += 1
        key = self._entry_key(entry)
        for i, existing in enumerate(self.entries):
            if self._entry_key(existing) == key:
                self.entries[i] = entry
                return
        self.entries.append(entry)

    def remove(self, trial_id: str) -> int:
        before = len(self.entries)
        self.entries = [e for e in self.entries if e.trial_id != trial_id]
        return before - len(self.entries)

    def persist(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(
                {"dim": self.dim, "encoder_version": self.encoder_version,
                 "counter": self._counter}
            ) + "\n")
            for e in self.entries:
                value = {
                    "chain": [
                        {"text": c.text, "polarity": c.polarity, "attribute": c.attribute}
                        for c in e.value.chain
                    ],
                    "instruction": e.value.instruction,
                    "target": (
                        {"text": e.value.target.text,
                         "polarity": e.value.target.polarity,
                         "attribute": e.value.target.attribute}
                        if e.value.target else None
                    ),
                }
                fh.write(json.dumps({
                    "trial_id": e.trial_id,
                    "counter": e.counter,
                    "key": [float(x) for x in e.key.vector],
                    "value": value,
                }, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path, expected_encoder_version: Optional[str] = None) -> "KnowledgeStore":
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            store = cls(header["dim"], header["encoder_version"])
            if (expected_encoder_version is not None
                    and header["encoder_version"] != expected_encoder_version):
                raise StaleStoreError(
                    f"store keys were encoded with {header['encoder_version']}, "
                    f"current model is {expected_encoder_version}"
                )
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                value = Exemplar(
                    chain=[
                        Criterion(c["text"], c["polarity"], c.get("attribute"))
                        for c in rec["value"]["chain"]
                    ],
                    instruction=rec["value"]["instruction"],
                    target=(
                        Criterion(
                            rec["value"]["target"]["text"],
                            rec["value"]["target"]["polarity"],
                            rec["value"]["target"].get("attribute"),
                        )
                        if rec["value"]["target"] else None
                    ),
                )
                key = TrialEmbedding(
                    np.array(rec["key"], dtype=np.float32),
                    rec["trial_id"], header["encoder_version"],
                )
                store.entries.append(
                    StoreEntry(key, value, rec["trial_id"], rec["counter"])
                )
            store._counter = header["counter"]
        return store


def build_store(trials, state: ModelState, vocab: Vocabulary,
                chain_len: Optional[int] = 3) -> KnowledgeStore:
    """One entry per (trial, criterion with a registered attribute)."""
    if not trials:
        raise ValueError("cannot build a store from an empty corpus")
    version = encoder_version(state)
    store = KnowledgeStore(state.config.d_model, version)
    for trial in trials:
        key = encode_setup(state, vocab, trial)
        criteria = trial.criteria
        for idx, criterion in enumerate(criteria):
            tag = criterion.attribute
            if tag is None or tag not in state.registry:
                continue
            chain = [c for j, c in enumerate(criteria) if j != idx]
            if chain_len is not None:
                chain = chain[:chain_len]
            store.upsert(StoreEntry(
                key=key,
                value=Exemplar(chain=chain, instruction=tag, target=criterion),
                trial_id=trial.trial_id,
            ))
    return store


def retrieve(store: KnowledgeStore, query, k: int,
             exclude_trial_id: Optional[str] = None) -> list:
    """Exact top-k by cosine, ties broken by insertion order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qvec = query.vector if isinstance(query, TrialEmbedding) else np.asarray(query)
    candidates = [
        e for e in store.entries if e.trial_id != exclude_trial_id
    ]
    if not candidates:
        return []
    keys = np.stack([e.key.vector for e in candidates])
    qn = qvec / (np.linalg.norm(qvec) or 1.0)
    sims = keys @ qn.astype(np.float32)
    order = sorted(range(len(candidates)),
                   key=lambda i: (-float(sims[i]), candidates[i].counter))
    return [candidates[i] for i in order[:k]]
