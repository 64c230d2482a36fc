"""Incremental instruction extension with a frozen backbone, plus the
continual-learning and ablation experiment harnesses.

Extension appends fresh embedding rows (instruction rows and the matching
special-token input embeddings) as separate parameter blocks. Incremental
updates train only those blocks, so every old parameter is bit-identical
afterwards, and new tokens are prompt-only, so generation for old
instructions cannot change.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import torch

from .corpus import Exemplar, select_trials
from .embedstore import KnowledgeStore, StoreEntry, build_store, encode_setup
from .generation import GenerationConfig
from .metrics import EvalResult, evaluate
from .model import ModelState
from .rng import derive_seed, make_rng
from .textproto import Vocabulary, instruction_token
from .training import OptimizerConfig, finetune, pretrain

log = logging.getLogger(__name__)


@dataclass
class UpdatePlan:
    """What an incremental update may touch."""

    new_tags: list
    trainable: list = field(default_factory=list)
    frozen: list = field(default_factory=list)

    def validate(self) -> None:
        overlap = set(self.trainable) & set(self.frozen)
        if overlap:
            raise ValueError(f"tensors both trainable and frozen: {sorted(overlap)}")


def extend_instructions(state: ModelState, vocab: Vocabulary,
                        new_tags) -> ModelState:
    """Append instruction rows and prompt-only special tokens for new tags.

    Old embedding rows stay bit-identical; the registry's frozen prefix is
    advanced to the pre-extension size. Extending by zero tags is a no-op.
    """
    new_tags = list(new_tags)
    if not new_tags:
        return state
    dupes = [t for t in new_tags if t in state.registry]
    if dupes or len(set(new_tags)) != len(new_tags):
        raise ValueError(f"duplicate instruction tags: {dupes or new_tags}")

    old_size = len(state.registry)
    gen = torch.Generator().manual_seed(
        derive_seed(state.config.seed, "extend", old_size)
    )
    rows = state.prompt.rows.append_block(len(new_tags), generative=True)
    emb = state.backbone.emb.append_block(len(new_tags), generative=False)
    with torch.no_grad():
        rows.uniform_(-0.08, 0.08, generator=gen)
        emb.uniform_(-0.08, 0.08, generator=gen)

    for tag in new_tags:
        token_id = vocab.add_special(instruction_token(tag))
        # input-only token: ids beyond the base vocab are never generated
        expected = state.backbone.emb.n_rows - len(new_tags) + new_tags.index(tag)
        if token_id != expected:
            raise RuntimeError(
                f"vocabulary id {token_id} out of step with embedding row {expected}"
            )
    state.registry.tags.extend(new_tags)
    state.registry.frozen_prefix_len = old_size
    for name in state.named_tensors():
        state.freeze.setdefault(name, False)
    state.apply_freeze()
    return state


def incremental_freeze_plan(state: ModelState, new_tags) -> UpdatePlan:
    """Only the newest row blocks train; backbone, old rows, and MLP freeze."""
    plan = UpdatePlan(new_tags=list(new_tags))
    names = list(state.named_tensors())
    n_row_blocks = len(state.prompt.rows.blocks)
    n_emb_blocks = len(state.backbone.emb.blocks)
    latest = {
        f"prompt.rows.blocks.{n_row_blocks - 1}",
        f"backbone.emb.blocks.{n_emb_blocks - 1}",
    }
    for name in names:
        (plan.trainable if name in latest else plan.frozen).append(name)
    plan.validate()
    return plan


def incremental_update(state: ModelState, vocab: Vocabulary,
                       store: KnowledgeStore, new_pairs, trials_by_id,
                       cfg: OptimizerConfig, *, msr: bool = True,
                       use_exemplar: bool = True) -> dict:
    """Train only the newly extended rows on pairs for the new instructions.

    Upserts the new pairs' trials into the store and returns a per-tensor
    before/after max-abs diff together with the training reports.
    """
    frozen_prefix = state.registry.frozen_prefix_len
    offenders = sorted({
        p.instruction for p in new_pairs
        if state.registry.index_of(p.instruction) < frozen_prefix
    })
    if offenders:
        raise ValueError(
            f"pairs reference frozen-range instructions: {offenders}"
        )

    plan = incremental_freeze_plan(state, [
        t for t in state.registry.tags[frozen_prefix:]
    ])
    state.freeze = {n: (n in set(plan.frozen)) for n in state.named_tensors()}
    state.apply_freeze()

    for trial_id in sorted({p.trial_id for p in new_pairs}):
        trial = trials_by_id[trial_id]
        key = encode_setup(state, vocab, trial)
        criteria = trial.criteria
        for idx, criterion in enumerate(criteria):
            tag = criterion.attribute
            if tag is None or tag not in state.registry:
                continue
            chain = [c for j, c in enumerate(criteria) if j != idx][:3]
            store.upsert(StoreEntry(
                key=key,
                value=Exemplar(chain=chain, instruction=tag, target=criterion),
                trial_id=trial_id,
            ))

    before = {n: p.detach().clone() for n, p in state.named_tensors().items()}
    reports = finetune(state, new_pairs, store, cfg, vocab, trials_by_id,
                       msr=msr, use_exemplar=use_exemplar)
    diff = {
        n: float((p.detach() - before[n]).abs().max())
        for n, p in state.named_tensors().items()
    }
    return {"plan": plan, "reports": reports, "tensor_diff": diff}


def partition_instructions(tags, n_subsets: int, seed: int) -> list:
    """Equal, mutually exclusive instruction subsets."""
    tags = sorted(tags)
    if len(tags) < n_subsets:
        raise ValueError(
            f"{len(tags)} instruction types cannot fill {n_subsets} subsets"
        )
    order = make_rng(seed, "continual_partition").permutation(len(tags))
    shuffled = [tags[i] for i in order]
    subsets = [[] for _ in range(n_subsets)]
    for i, tag in enumerate(shuffled):
        subsets[i % n_subsets].append(tag)
    return [sorted(s) for s in subsets]


def _eval_step(state, vocab, store, trials, split, gen_cfg, seen_tags,
               max_requests, use_prompt=True, use_exemplar=True):
    return evaluate(
        state, vocab, store, trials, split, gen_cfg,
        level="criteria", max_requests=max_requests,
        use_prompt=use_prompt, use_exemplar=use_exemplar,
        instructions=set(seen_tags),
    )


def continual_harness(trials, split, pretrained: ModelState, vocab: Vocabulary,
                      pairs, ft_cfg: OptimizerConfig, gen_cfg: GenerationConfig,
                      *, n_subsets: int = 4, seed: int = 0,
                      store_chain_len: int = 3,
                      max_eval_requests=None) -> dict:
    """Sequential-reveal comparison of full retraining vs incremental updates.

    Returns plot-ready curve rows (variant, step, metric, value) plus the
    training-set manifest per step.
    """
    tags = sorted({p.instruction for p in pairs})
    subsets = partition_instructions(tags, n_subsets, seed)
    trials_by_id = {t.trial_id: t for t in trials}
    train_trials = select_trials(trials, split.train)
    curves, manifest = [], []

    def record(variant, step, result: EvalResult):
        metrics = {}
        if result.pooled_micro:
            metrics["micro_F1"] = result.pooled_micro["F1"]
            metrics["micro_Jaccard"] = result.pooled_micro["micro_Jaccard"]
        if result.instruction_following_rate is not None:
            metrics["follow_rate"] = result.instruction_following_rate
        for rep in result.reports:
            if rep.group is None:
                metrics[f"B1_{rep.polarity}"] = rep.B1
        for name, value in sorted(metrics.items()):
            curves.append({"variant": variant, "step": step,
                           "metric": name, "value": value})

    # Re-train: fresh finetune on the cumulative subsets at every reveal
    for step in range(1, n_subsets + 1):
        seen = sorted(t for s in subsets[:step] for t in s)
        model = copy.deepcopy(pretrained)
        extend_instructions(model, vocab, [t for t in seen if t not in model.registry])
        model.freeze = {n: False for n in model.named_tensors()}
        model.apply_freeze()
        step_pairs = [p for p in pairs if p.instruction in seen
                      and p.trial_id in set(split.train)]
        manifest.append({"variant": "retrain", "step": step,
                         "tags": seen, "n_pairs": len(step_pairs)})
        store = build_store(train_trials, model, vocab, chain_len=store_chain_len)
        finetune(model, step_pairs, store, ft_cfg, vocab, trials_by_id)
        record("retrain", step,
               _eval_step(model, vocab, store, trials, split, gen_cfg, set(seen),
                          max_eval_requests))

    # Incremental: one model, frozen backbone after the first subset
    model = copy.deepcopy(pretrained)
    extend_instructions(model, vocab,
                        [t for t in subsets[0] if t not in model.registry])
    model.freeze = {n: False for n in model.named_tensors()}
    model.apply_freeze()
    store = build_store(train_trials, model, vocab, chain_len=store_chain_len)
    seen: list = []
    for step, subset in enumerate(subsets, start=1):
        seen = sorted(seen + subset)
        step_pairs = [p for p in pairs if p.instruction in subset
                      and p.trial_id in set(split.train)]
        manifest.append({"variant": "incremental", "step": step,
                         "tags": subset, "n_pairs": len(step_pairs)})
        if step == 1:
            finetune(model, step_pairs, store, ft_cfg, vocab, trials_by_id)
        else:
            extend_instructions(model, vocab, subset)
            incremental_update(model, vocab, store, step_pairs, trials_by_id,
                               cfg=ft_cfg)
        record("incremental", step,
               _eval_step(model, vocab, store, trials, split, gen_cfg, set(seen),
                          max_eval_requests))

    return {"curves": curves, "manifest": manifest, "subsets": subsets}


ABLATION_VARIANTS = ("full", "wo_msr", "wo_rag", "wo_prompt")


def ablation_harness(trials, split, vocab: Vocabulary, make_model, samples,
                     pairs, pre_cfg: OptimizerConfig, ft_cfg: OptimizerConfig,
                     gen_cfg: GenerationConfig, *, store_chain_len: int = 3,
                     max_eval_requests=None) -> dict:
    """Train and evaluate {full, w/o MSR, w/o RAG, w/o Prompt} identically.

    ``make_model`` is a zero-argument factory so every variant starts from
    the same deterministic initialization.
    """
    flags = {
        "full": dict(msr=True, use_exemplar=True, use_prompt=True),
        "wo_msr": dict(msr=False, use_exemplar=True, use_prompt=True),
        "wo_rag": dict(msr=True, use_exemplar=False, use_prompt=True),
        "wo_prompt": dict(msr=True, use_exemplar=True, use_prompt=False),
    }
    trials_by_id = {t.trial_id: t for t in trials}
    train_trials = select_trials(trials, split.train)
    results = {}
    for variant in ABLATION_VARIANTS:
        f = flags[variant]
        model = make_model()
        pretrain(model, samples, pre_cfg, vocab,
                 msr=f["msr"], use_exemplar=f["use_exemplar"])
        store = (build_store(train_trials, model, vocab, chain_len=store_chain_len)
                 if f["use_exemplar"] else None)
        finetune(model, pairs, store, ft_cfg, vocab, trials_by_id,
                 msr=f["msr"], use_exemplar=f["use_exemplar"],
                 use_prompt=f["use_prompt"])
        results[variant] = evaluate(
            model, vocab, store, trials, split, gen_cfg,
            level="criteria", max_requests=max_eval_requests,
            use_prompt=f["use_prompt"], use_exemplar=f["use_exemplar"],
        )
        log.info("ablation variant %s evaluated", variant)
    return results
