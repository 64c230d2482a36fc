"""Losses and training loops: likelihood pretraining, likelihood+contrastive
finetuning, and a finite-difference gradient verifier.

The optimizer is gradient descent with decoupled weight decay (Adam moments,
constant learning rate, no schedule). Loss is only ever taken on positions
whose next token lies in the reasoning-chain or target segments.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch

from .corpus import Exemplar
from .embedstore import KnowledgeStore, encode_setup, retrieve
from .model import ModelState, embed_instruction, loss_mask, token_nll
from .rng import make_rng
from .textproto import PromptSequence, Vocabulary, build_sequence

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; parameters were restored to the last good epoch."""


@dataclass
class OptimizerConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0
    margin: float = 0.5
    clip_norm: float = 1.0

    def validate(self) -> None:
        positives = {
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size, "epochs": self.epochs,
            "clip_norm": self.clip_norm,
        }
        bad = [k for k, v in positives.items() if v <= 0]
        if bad:
            raise ValueError(f"optimizer fields must be positive: {bad}")
        if self.learning_rate < 0:
            # zero is allowed for diagnostics (a step must then be a no-op)
            raise ValueError("learning_rate must be nonnegative")
        if not 0 < self.margin <= 2:
            raise ValueError("margin must lie in (0, 2]")


# paper-stage hyperparameter defaults, as documented profiles
PRETRAIN_DEFAULTS = dict(learning_rate=5e-5, weight_decay=1e-4, batch_size=64, epochs=5)
FINETUNE_DEFAULTS = dict(learning_rate=5e-5, weight_decay=1e-5, batch_size=16, epochs=10)


@dataclass
class LossReport:
    step: int
    L_MLE: float
    L_CL: float
    L_FT: float
    grad_norm: float = 0.0

    def to_dict(self) -> dict:
        return {"step": self.step, "L_MLE": self.L_MLE, "L_CL": self.L_CL,
                "L_FT": self.L_FT, "grad_norm": self.grad_norm}


def _batch_forward(state: ModelState, batch, use_prompt: bool):
    """Right-padded batched forward; returns (logits, hidden, prompt_len)."""
    vocab_pad = 0  # pad id is 1 in the vocabulary, but any id works: padded
    # positions are trailing and never read by the loss gathers.
    B = len(batch)
    T = max(len(s) for s in batch)
    ids = torch.zeros((B, T), dtype=torch.long)
    for b, seq in enumerate(batch):
        ids[b, : len(seq)] = torch.tensor(seq.ids, dtype=torch.long)
    prompt = None
    if use_prompt:
        rows = []
        for seq in batch:
            if seq.instruction_index is None:
                raise ValueError("use_prompt batch requires instruction indices")
            rows.append(embed_instruction(state, seq.instruction_index))
        prompt = torch.stack(rows)  # (B, P, d)
    h, _ = state.backbone.hidden_states(ids, prompt)
    logits = state.backbone.logits_from_hidden(h)
    n_prompt = 0 if prompt is None else prompt.shape[1]
    return logits, h, n_prompt


def _gather_nll(logits, batch, n_prompt: int) -> torch.Tensor:
    rows, cols, tgts = [], [], []
    for b, seq in enumerate(batch):
        ids = seq.ids
        for i in loss_mask(seq):
            rows.append(b)
            cols.append(n_prompt + i)
            tgts.append(ids[i + 1])
    if not rows:
        raise ValueError("batch has an empty loss mask")
    logp = torch.log_softmax(logits, dim=-1)
    idx = (torch.tensor(rows), torch.tensor(cols))
    return -logp[idx][torch.arange(len(tgts)), torch.tensor(tgts)]


def mle_loss(state: ModelState, batch, use_prompt: bool = False) -> torch.Tensor:
    """Mean negative log-likelihood over rationale+target positions."""
    logits, _, n_prompt = _batch_forward(state, batch, use_prompt)
    return _gather_nll(logits, batch, n_prompt).mean()


def contrastive_loss(hidden: torch.Tensor, margin: float) -> torch.Tensor:
    """Pairwise cosine margin loss over one sequence's target-token states.

    Each ordered pair (l != j) contributes max(0, margin - s(h_l,h_l)
    + s(h_l,h_j)); the self-similarity term is identically 1 under cosine.
    """
    L = hidden.shape[0]
    if L < 2:
        log.warning("contrastive loss needs >= 2 states, got %d; returning 0", L)
        return hidden.sum() * 0.0
    normed = hidden / hidden.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    sims = normed @ normed.t()
    terms = torch.clamp(margin - 1.0 + sims, min=0.0)
    off_diag = terms.sum() - terms.diagonal().sum()
    return off_diag / (L * (L - 1))


def finetune_loss(state: ModelState, batch, margin: float,
                  use_prompt: bool = True):
    """Combined loss; returns (scalar tensor, LossReport with grad_norm unset)."""
    logits, hidden, n_prompt = _batch_forward(state, batch, use_prompt)
    nll = _gather_nll(logits, batch, n_prompt).mean()
    cl_parts = []
    for b, seq in enumerate(batch):
        positions = [n_prompt + i + 1 for i in loss_mask(seq)]
        if len(positions) < 2:
            continue
        cl_parts.append(contrastive_loss(hidden[b, positions], margin))
    cl = torch.stack(cl_parts).mean() if cl_parts else nll * 0.0
    total = nll + cl
    report = LossReport(0, float(nll.detach()), float(cl.detach()),
                        float(total.detach()))
    return total, report


def perplexity(state: ModelState, seqs, use_prompt: bool = False,
               batch_size: int = 32) -> float:
    """exp(mean per-token nll) over the loss positions of ``seqs``."""
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            batch = seqs[i : i + batch_size]
            logits, _, n_prompt = _batch_forward(state, batch, use_prompt)
            nll = _gather_nll(logits, batch, n_prompt)
            total += float(nll.sum())
            count += nll.numel()
    return math.exp(total / count)


def _snapshot(state: ModelState) -> dict:
    return {n: p.detach().clone() for n, p in state.named_tensors().items()}


def _restore(state: ModelState, snap: dict) -> None:
    with torch.no_grad():
        for n, p in state.named_tensors().items():
            p.copy_(snap[n])


def _run_training(state: ModelState, seqs, cfg: OptimizerConfig, *,
                  use_prompt: bool, combined: bool,
                  log_path: Optional[str] = None,
                  stop_below: Optional[float] = None) -> list:
    """Shared epoch loop. ``combined`` switches the finetuning objective on."""
    cfg.validate()
    if not seqs:
        raise ValueError("training set is empty")
    state.apply_freeze()
    params = list(state.trainable_tensors().values())
    if not params:
        raise ValueError("freeze mask leaves no trainable parameters")
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    rng = make_rng(cfg.seed, "shuffle")
    reports = []
    good = _snapshot(state)
    step = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(seqs))
            epoch_mle, epoch_n = 0.0, 0
            for lo in range(0, len(seqs), cfg.batch_size):
                batch = [seqs[i] for i in order[lo : lo + cfg.batch_size]]
                if combined:
                    loss, report = finetune_loss(state, batch, cfg.margin,
                                                 use_prompt=use_prompt)
                else:
                    loss = mle_loss(state, batch, use_prompt=use_prompt)
                    report = LossReport(0, float(loss.detach()), 0.0,
                                        float(loss.detach()))
                if not torch.isfinite(loss):
                    _restore(state, good)
                    raise TrainingDiverged(
                        f"non-finite loss at step {step}; restored last good epoch"
                    )
                opt.zero_grad()
                loss.backward()
                grad_norm = torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
                opt.step()
                report.step = step
                report.grad_norm = float(grad_norm)
                reports.append(report)
                if log_fh:
                    row = report.to_dict()
                    row["lr"] = cfg.learning_rate
                    log_fh.write(json.dumps(row) + "\n")
                epoch_mle += report.L_MLE * len(batch)
                epoch_n += len(batch)
                step += 1
            good = _snapshot(state)
            if stop_below is not None and epoch_mle / epoch_n < stop_below:
                break
    finally:
        if log_fh:
            log_fh.close()
    return reports


def build_pretrain_sequences(samples, vocab: Vocabulary, state: ModelState, *,
                             msr: bool = True, use_exemplar: bool = True,
                             instruction_first: bool = False) -> list:
    """Assemble (setup ++ exemplar) -> (chain ++ target) sequences."""
    seqs = []
    for s in samples:
        seqs.append(build_sequence(
            vocab, s.trial, s.exemplar if use_exemplar else None, None,
            s.rationale, s.target,
            context_window=state.config.context_window, reserve=0,
            msr=msr, instruction_first=instruction_first,
        ))
    return seqs


def build_finetune_sequences(pairs, trials_by_id, store: Optional[KnowledgeStore],
                             state: ModelState, vocab: Vocabulary, *,
                             msr: bool = True, use_exemplar: bool = True,
                             retrieval_k: int = 1,
                             instruction_first: bool = False) -> list:
    """Assemble instruction-conditioned sequences with retrieved exemplars."""
    seqs = []
    query_cache: dict = {}
    for pair in pairs:
        trial = trials_by_id[pair.trial_id]
        exemplar: Optional[Exemplar] = None
        if use_exemplar and store is not None and len(store):
            if trial.trial_id not in query_cache:
                query_cache[trial.trial_id] = encode_setup(state, vocab, trial)
            hits = retrieve(store, query_cache[trial.trial_id], retrieval_k,
                            exclude_trial_id=trial.trial_id)
            if hits:
                exemplar = hits[0].value
        seqs.append(build_sequence(
            vocab, trial, exemplar, pair.instruction,
            pair.rationale_chain, pair.target,
            context_window=state.config.context_window,
            reserve=state.config.prompt_len, msr=msr,
            instruction_first=instruction_first,
            instruction_index=state.registry.index_of(pair.instruction),
        ))
    return seqs


def pretrain(state: ModelState, samples, cfg: OptimizerConfig,
             vocab: Vocabulary, *, msr: bool = True, use_exemplar: bool = True,
             log_path: Optional[str] = None,
             stop_below: Optional[float] = None) -> list:
    """Likelihood training on same-trial exemplar samples, no neural prompt."""
    seqs = build_pretrain_sequences(samples, vocab, state, msr=msr,
                                    use_exemplar=use_exemplar)
    return _run_training(state, seqs, cfg, use_prompt=False, combined=False,
                         log_path=log_path, stop_below=stop_below)


def finetune(state: ModelState, pairs, store: Optional[KnowledgeStore],
             cfg: OptimizerConfig, vocab: Vocabulary, trials_by_id, *,
             msr: bool = True, use_exemplar: bool = True,
             use_prompt: bool = True,
             log_path: Optional[str] = None) -> list:
    """Instruction tuning with the combined objective and retrieved exemplars."""
    seqs = build_finetune_sequences(
        pairs, trials_by_id, store, state, vocab,
        msr=msr, use_exemplar=use_exemplar,
    )
    return _run_training(state, seqs, cfg, use_prompt=use_prompt, combined=True,
                         log_path=log_path)


def grad_check(state: ModelState, batch, n_probes: int = 50,
               seed: int = 0, margin: float = 2.0,
               step: float = 1e-3) -> dict:
    """Central-difference check of the combined loss gradient.

    Probes are spread round-robin over the named tensors so every parameter
    group, including the instruction-embedding path, is exercised. Frozen
    tensors report an analytic gradient of 0 and are excluded from the max.

    The default margin of 2 keeps every contrastive pair term active and away
    from the hinge kink, where finite differences are undefined; the analytic
    path checked is identical for any margin.
    """
    work = copy.deepcopy(state)
    work.backbone.double()
    work.prompt.double()

    loss_fn = lambda: finetune_loss(work, batch, margin, use_prompt=True)[0]
    loss = loss_fn()
    loss.backward()

    tensors = work.named_tensors()
    names = sorted(tensors)
    rng = make_rng(seed, "grad_check")
    records = []
    max_rel = 0.0
    for probe in range(n_probes):
        name = names[probe % len(names)]
        p = tensors[name]
        flat_idx = int(rng.integers(p.numel()))
        frozen = work.freeze.get(name, False)
        analytic = 0.0
        if not frozen and p.grad is not None:
            analytic = float(p.grad.reshape(-1)[flat_idx])
        with torch.no_grad():
            orig = float(p.reshape(-1)[flat_idx])
            p.reshape(-1)[flat_idx] = orig + step
            up = float(loss_fn())
            p.reshape(-1)[flat_idx] = orig - step
            down = float(loss_fn())
            p.reshape(-1)[flat_idx] = orig
        fd = (up - down) / (2 * step)
        rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
        records.append({"tensor": name, "index": flat_idx, "fd": fd,
                        "analytic": analytic, "rel_error": rel,
                        "frozen": frozen})
        if not frozen:
            max_rel = max(max_rel, rel)
    return {"max_rel_error": max_rel, "probes": records}
