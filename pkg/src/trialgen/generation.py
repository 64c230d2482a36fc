"""Decoding pipeline: repeated top-k sampling, candidate clustering, and
minimum-perplexity selection per cluster.

Rollouts draw from per-candidate RNG streams derived from (seed, request,
candidate index), so parallel and serial execution produce identical sets.
Perplexity is exp(mean nll) of the generated tokens under the untempered
model distribution, conditioned on the full prompt.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .corpus import Criterion, TrialDocument
from .embedstore import KnowledgeStore, encode_ids, encode_setup, retrieve
from .model import ModelState, embed_instruction
from .rng import make_rng
from .textproto import (
    ContextOverflowError,
    ParseResult,
    PromptSequence,
    Segment,
    Vocabulary,
    assemble_prompt,
    parse_output,
)

log = logging.getLogger(__name__)


@dataclass
class GenerationConfig:
    k_s: int = 50
    Q: int = 20
    k_q: int = 5
    max_new_tokens: int = 64
    temperature: float = 1.0
    seed: int = 0
    retrieval_k: int = 1

    def validate(self, vocab_size: Optional[int] = None) -> None:
        if self.k_s < 1:
            raise ValueError("k_s must be >= 1")
        if vocab_size is not None and self.k_s > vocab_size:
            raise ValueError("k_s must not exceed the vocabulary size")
        if not 1 <= self.k_q <= self.Q:
            raise ValueError("need 1 <= k_q <= Q")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class Candidate:
    index: int
    ids: list
    text: str
    per_token_nll: list
    ppl: float
    embedding: Optional[np.ndarray] = None
    cluster_id: Optional[int] = None


def topk_distribution(logits: np.ndarray, k_s: int,
                      temperature: float) -> tuple:
    """Renormalized distribution over the k_s most probable tokens.

    Temperature applies before the restriction; ties at the cut go to lower
    token ids. Returns (token_ids, probabilities) with probabilities summing
    to 1.
    """
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")[:k_s]
    kept = probs[order]
    kept /= kept.sum()
    return order, kept


def sample_step(logits: np.ndarray, k_s: int, temperature: float,
                rng: np.random.Generator) -> int:
    """Draw one token from the renormalized top-k_s distribution; k_s=1 is greedy."""
    order, kept = topk_distribution(logits, k_s, temperature)
    if k_s == 1:
        return int(order[0])
    r = rng.random()
    cum = np.cumsum(kept)
    return int(order[int(np.searchsorted(cum, r, side="right").clip(0, k_s - 1))])


def _decode(state: ModelState, input_ids, eos_id: int, cfg: GenerationConfig,
            rng: Optional[np.random.Generator], *, greedy: bool,
            instruction_index: Optional[int], use_prompt: bool,
            prefix_ids=()) -> tuple:
    """One rollout with a KV cache; returns (content_ids, per_token_nll)."""
    prompt = None
    if use_prompt:
        if instruction_index is None:
            raise ValueError("use_prompt decode requires an instruction index")
        prompt = embed_instruction(state, instruction_index).unsqueeze(0)
    ids = torch.tensor(list(input_ids), dtype=torch.long)
    with torch.no_grad():
        h, past = state.backbone.hidden_states(ids, prompt)
        last_logits = state.backbone.logits_from_hidden(h[:, -1:])[0, 0]
        text_len = len(input_ids)
        generated, nlls = [], []
        for step in range(cfg.max_new_tokens):
            logits_np = last_logits.numpy().astype(np.float64)
            if step < len(prefix_ids):
                next_id = int(prefix_ids[step])
            elif greedy:
                next_id = sample_step(logits_np, 1, 1.0, rng)
            else:
                next_id = sample_step(logits_np, cfg.k_s, cfg.temperature, rng)
            logp = torch.log_softmax(last_logits, dim=-1)
            nll = -float(logp[next_id])
            if next_id == eos_id:
                break
            generated.append(next_id)
            nlls.append(nll)
            h, past = state.backbone.hidden_states(
                torch.tensor([[next_id]], dtype=torch.long), past=past,
                text_pos_offset=text_len + step,
            )
            last_logits = state.backbone.logits_from_hidden(h[:, -1:])[0, 0]
    return generated, nlls


def sample_candidates(state: ModelState, vocab: Vocabulary, input_ids,
                      cfg: GenerationConfig, seed_parts=(), *,
                      instruction_index: Optional[int] = None,
                      use_prompt: bool = False, prefix_ids=()) -> list:
    """Q independent rollouts; empty generations carry a +inf ppl sentinel."""
    cfg.validate(vocab.size)
    headroom = int(use_prompt) * state.config.prompt_len
    if len(input_ids) + headroom + cfg.max_new_tokens > state.config.context_window:
        raise ContextOverflowError(
            f"prompt of {len(input_ids)} tokens leaves no room for "
            f"{cfg.max_new_tokens} new tokens"
        )
    candidates = []
    for q in range(cfg.Q):
        rng = make_rng(cfg.seed, *seed_parts, "candidate", q)
        ids, nlls = _decode(
            state, input_ids, vocab.eos_id, cfg, rng, greedy=False,
            instruction_index=instruction_index, use_prompt=use_prompt,
            prefix_ids=prefix_ids,
        )
        ppl = math.exp(sum(nlls) / len(nlls)) if nlls else float("inf")
        candidates.append(Candidate(
            index=q, ids=ids, text=vocab.detokenize(ids),
            per_token_nll=nlls, ppl=ppl,
        ))
    return candidates


def kmeans(points: np.ndarray, k: int, seed: int) -> tuple:
    """Deterministic Lloyd's algorithm with k-means++ seeding.

    k is lowered to the number of distinct rows; ties in assignment go to the
    lowest centroid index; empty clusters keep their previous centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    distinct = len(np.unique(points, axis=0))
    k = max(1, min(k, distinct))
    rng = make_rng(seed, "kmeans")

    centroids = [points[int(rng.integers(n))]]
    while len(centroids) < k:
        d2 = np.min(
            [np.sum((points - c) ** 2, axis=1) for c in centroids], axis=0
        )
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids.append(points[idx])
    centroids = np.stack(centroids)

    labels = np.zeros(n, dtype=int)
    for _ in range(100):
        dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)  # argmin returns the lowest index on ties
        new_centroids = centroids.copy()
        for c in range(k):
            members = points[labels == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if shift < 1e-6:
            break
    dists = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)
    return labels, centroids


def cluster_candidates(candidates, k_q: int, seed: int,
                       state: ModelState) -> list:
    """Embed candidate token sequences and k-means them into <= k_q clusters."""
    embeddable = [c for c in candidates if c.ids]
    for c in candidates:
        c.cluster_id = None
    if not embeddable:
        return candidates
    for c in embeddable:
        c.embedding = encode_ids(state, c.ids)
    points = np.stack([c.embedding for c in embeddable])
    labels, _ = kmeans(points, k_q, seed)
    for c, lab in zip(embeddable, labels):
        c.cluster_id = int(lab)
    return candidates


def select_candidates(candidates) -> list:
    """Per cluster, the finite-ppl candidate with minimum ppl; cluster order."""
    clusters: dict = {}
    for c in candidates:
        if c.cluster_id is None:
            continue
        clusters.setdefault(c.cluster_id, []).append(c)
    selected = []
    for cid in sorted(clusters):
        finite = [c for c in clusters[cid] if math.isfinite(c.ppl)]
        if not finite:
            log.warning("cluster %d holds only unusable candidates, dropped", cid)
            continue
        best = min(finite, key=lambda c: (c.ppl, c.index))
        selected.append(best)
    return selected


@dataclass
class GenerationOutcome:
    trial_id: str
    instruction: Optional[str]
    candidates: list
    selected: list          # Candidate
    parses: list = field(default_factory=list)  # ParseResult per selected

    def report(self) -> dict:
        return {
            "trial_id": self.trial_id,
            "instruction": self.instruction,
            "candidates": [
                {"text": c.text, "ppl": c.ppl if math.isfinite(c.ppl) else None,
                 "cluster": c.cluster_id}
                for c in self.candidates
            ],
            "selected": [c.text for c in self.selected],
        }


def _exemplar_for(state, vocab, store, trial, k):
    if store is None or not len(store):
        log.info("knowledge store empty, generating without an exemplar")
        return None
    query = encode_setup(state, vocab, trial)
    hits = retrieve(store, query, k, exclude_trial_id=trial.trial_id)
    if not hits:
        log.info("no retrievable exemplar for %s", trial.trial_id)
        return None
    return hits[0].value


def generate_criteria(state: ModelState, vocab: Vocabulary,
                      store: Optional[KnowledgeStore], trial: TrialDocument,
                      instruction: str, cfg: GenerationConfig,
                      prefix_ids=(), *, use_prompt: bool = True,
                      use_exemplar: bool = True,
                      instruction_first: bool = False) -> GenerationOutcome:
    """Criteria-level request: sample, cluster, rank, and parse the winners."""
    if instruction not in state.registry:
        raise KeyError(f"instruction {instruction!r} is not registered")
    exemplar = (
        _exemplar_for(state, vocab, store, trial, cfg.retrieval_k)
        if use_exemplar else None
    )
    budget = (
        state.config.context_window - cfg.max_new_tokens
        - int(use_prompt) * state.config.prompt_len
    )
    input_ids, _ = assemble_prompt(
        vocab, trial, exemplar, instruction, budget=budget,
        instruction_first=instruction_first,
    )
    candidates = sample_candidates(
        state, vocab, input_ids, cfg,
        seed_parts=(trial.trial_id, instruction),
        instruction_index=state.registry.index_of(instruction),
        use_prompt=use_prompt, prefix_ids=prefix_ids,
    )
    cluster_candidates(candidates, cfg.k_q, cfg.seed, state)
    selected = select_candidates(candidates)
    parses = [parse_output(vocab, c.ids) for c in selected]
    return GenerationOutcome(trial.trial_id, instruction, candidates,
                             selected, parses)


def generate_trial(state: ModelState, vocab: Vocabulary,
                   store: Optional[KnowledgeStore], trial: TrialDocument,
                   cfg: GenerationConfig, *, use_exemplar: bool = True) -> tuple:
    """Trial-level request: greedy decode of the full chain, parsed to criteria."""
    exemplar = (
        _exemplar_for(state, vocab, store, trial, cfg.retrieval_k)
        if use_exemplar else None
    )
    budget = state.config.context_window - cfg.max_new_tokens
    input_ids, _ = assemble_prompt(vocab, trial, exemplar, None, budget=budget)
    ids, nlls = _decode(
        state, input_ids, vocab.eos_id, cfg, None, greedy=True,
        instruction_index=None, use_prompt=False,
    )
    parsed = parse_output(vocab, ids)
    criteria = list(parsed.rationale)
    if parsed.target is not None:
        criteria.append(parsed.target)
    outcome = GenerationOutcome(trial.trial_id, None, [], [], [parsed])
    outcome.candidates = [Candidate(
        0, ids, vocab.detokenize(ids), nlls,
        math.exp(sum(nlls) / len(nlls)) if nlls else float("inf"),
    )]
    outcome.selected = list(outcome.candidates)
    return criteria, outcome
