"""NLG metrics (BLEU-1, ROUGE-L, METEOR, CIDEr), clinical accuracy, and the
criteria-level / trial-level evaluation protocols with per-disease grouping.

B1/METEOR/ROUGE-L are reported x100 and CIDEr x10; precision/recall/F1/Jaccard
stay in [0, 1]. Micro aggregates are pooled counts over trials, not means of
per-trial scores.
"""

from __future__ import annotations

import logging
import math
import statistics
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

from .corpus import TrialDocument, select_trials
from .criteria_parser import AttributeSchema, compare_sets, default_schema, parse_criterion, relation_set
from .embedstore import KnowledgeStore
from .generation import GenerationConfig, generate_criteria, generate_trial
from .model import ModelState
from .textproto import Vocabulary, polarity_token, words

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# text metrics; inputs are token lists (see textproto.words)


def bleu1(candidate, references) -> float:
    """Clipped unigram precision times brevity penalty, x100."""
    if not candidate:
        return 0.0
    cand_counts = Counter(candidate)
    max_ref = Counter()
    for ref in references:
        for tok, n in Counter(ref).items():
            max_ref[tok] = max(max_ref[tok], n)
    clipped = sum(min(n, max_ref.get(tok, 0)) for tok, n in cand_counts.items())
    precision = clipped / len(candidate)
    c = len(candidate)
    r = min((len(ref) for ref in references),
            key=lambda L: (abs(L - c), L))
    bp = math.exp(min(0.0, 1.0 - r / c))
    return 100.0 * precision * bp


def _lcs_len(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.2) -> float:
    """LCS F-measure with recall weighting beta, x100."""
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_len(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    f = (1 + beta**2) * r * p / (r + beta**2 * p)
    return 100.0 * f


_SUFFIXES = ("ing", "ed", "es", "s", "ly")


def stem(token: str) -> str:
    """Suffix stripping; keeps at least three characters."""
    for suf in _SUFFIXES:
        if token.endswith(suf) and len(token) - len(suf) >= 3:
            return token[: -len(suf)]
    return token


def _align(candidate, reference, key) -> list:
    """In-order greedy unigram alignment; returns (cand_idx, ref_idx) pairs."""
    used = [False] * len(reference)
    pairs = []
    for i, tok in enumerate(candidate):
        for j, rtok in enumerate(reference):
            if not used[j] and key(tok) == key(rtok):
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor(candidate, reference) -> float:
    """Two-stage alignment (exact, then stems), harmonic mean, chunk penalty; x100."""
    if not candidate or not reference:
        return 0.0
    exact = _align(candidate, reference, key=lambda t: t)
    matched_c = {i for i, _ in exact}
    matched_r = {j for _, j in exact}
    rest_c = [(i, t) for i, t in enumerate(candidate) if i not in matched_c]
    rest_r = [(j, t) for j, t in enumerate(reference) if j not in matched_r]
    stems = _align([t for _, t in rest_c], [t for _, t in rest_r],
                   key=stem)
    pairs = sorted(
        exact + [(rest_c[i][0], rest_r[j][0]) for i, j in stems]
    )
    m = len(pairs)
    if m == 0:
        return 0.0
    p = m / len(candidate)
    r = m / len(reference)
    f_mean = 10 * p * r / (r + 9 * p)
    chunks = 1
    for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
        if c1 != c0 + 1 or r1 != r0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return 100.0 * f_mean * (1.0 - penalty)


@dataclass
class CiderIDF:
    n_docs: int
    idf: dict  # ngram -> idf value

    def value(self, ngram) -> float:
        return self.idf.get(ngram, math.log(self.n_docs) if self.n_docs > 1 else 0.0)


def _ngrams(tokens, n: int):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def build_cider_idf(reference_docs, max_n: int = 4) -> CiderIDF:
    """Document-frequency IDF over the reference side of an evaluation split."""
    n_docs = len(reference_docs)
    df: Counter = Counter()
    for doc in reference_docs:
        seen = set()
        for n in range(1, max_n + 1):
            seen.update(_ngrams(doc, n))
        df.update(seen)
    idf = {g: math.log(n_docs / max(1, c)) for g, c in df.items()}
    return CiderIDF(n_docs, idf)


def _tfidf_cosine(a_counts, b_counts, idf: CiderIDF) -> float:
    def vec(counts):
        return {g: n * idf.value(g) for g, n in counts.items()}

    va, vb = vec(a_counts), vec(b_counts)
    dot = sum(w * vb.get(g, 0.0) for g, w in va.items())
    na = math.sqrt(sum(w * w for w in va.values()))
    nb = math.sqrt(sum(w * w for w in vb.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def cider(candidate, references, corpus_idf: CiderIDF, max_n: int = 4) -> float:
    """Mean over n-gram orders of mean TF-IDF cosine against references, x10."""
    if not candidate or not references:
        return 0.0
    per_n = []
    for n in range(1, max_n + 1):
        cand_counts = Counter(_ngrams(candidate, n))
        sims = [
            _tfidf_cosine(cand_counts, Counter(_ngrams(ref, n)), corpus_idf)
            for ref in references
        ]
        per_n.append(sum(sims) / len(sims))
    return 10.0 * sum(per_n) / len(per_n)


# --------------------------------------------------------------------------
# clinical accuracy


def micro_scores(counts) -> dict:
    """Pooled P/R/F1/Jaccard from per-trial {tp, fp, fn, union} rows."""
    tp = sum(c["tp"] for c in counts)
    fp = sum(c["fp"] for c in counts)
    fn = sum(c["fn"] for c in counts)
    union = sum(c.get("union", c["tp"] + c["fp"] + c["fn"]) for c in counts)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    jac = tp / union if union else 0.0
    return {"P": p, "R": r, "F1": f1, "micro_Jaccard": jac}


def clinical_accuracy(pred_trials, gold_trials,
                      schema: Optional[AttributeSchema] = None) -> dict:
    """Micro P/R/F1/Jaccard per polarity over aligned per-trial criteria lists.

    Each item maps polarity -> list of criterion texts; relation sets are
    parsed here. Raises if the gold side holds no relations at all.
    """
    schema = schema or default_schema()
    out = {}
    total_gold = 0
    for polarity in ("inclusion", "exclusion"):
        counts = []
        for pred, gold in zip(pred_trials, gold_trials):
            pset = relation_set(pred.get(polarity, []), schema)
            gset = relation_set(gold.get(polarity, []), schema)
            total_gold += len(gset)
            row = compare_sets(pset, gset)
            row["union"] = len(pset | gset)
            counts.append(row)
        out[polarity] = micro_scores(counts)
    if total_gold == 0:
        raise ValueError("gold side holds no relations; accuracy undefined")
    return out


# --------------------------------------------------------------------------
# evaluation protocols


@dataclass
class MetricReport:
    level: str          # criteria | trial
    polarity: str       # inclusion | exclusion
    B1: float
    METEOR: float
    ROUGE_L: float
    CIDEr: float
    P: float
    R: float
    F1: float
    micro_Jaccard: float
    n: int
    group: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "level": self.level, "polarity": self.polarity, "group": self.group,
            "n": self.n, "B1": self.B1, "METEOR": self.METEOR,
            "ROUGE_L": self.ROUGE_L, "CIDEr": self.CIDEr, "P": self.P,
            "R": self.R, "F1": self.F1, "micro_Jaccard": self.micro_Jaccard,
        }


@dataclass
class EvalRecord:
    trial_id: str
    disease: str
    polarity: str
    gold_text: str
    pred_text: str
    requested_attribute: Optional[str] = None
    followed: bool = False


@dataclass
class EvalResult:
    reports: list
    records: list
    instruction_following_rate: Optional[float] = None
    pooled_micro: Optional[dict] = None
    group_summary: dict = field(default_factory=dict)


def _score_bucket(records, level: str, schema: AttributeSchema,
                  group: Optional[str] = None) -> list:
    """One MetricReport per polarity over a record bucket."""
    reports = []
    for polarity in ("inclusion", "exclusion"):
        bucket = [r for r in records if r.polarity == polarity]
        if not bucket:
            continue
        golds = [words(r.gold_text) for r in bucket]
        preds = [words(r.pred_text) for r in bucket]
        idf = build_cider_idf(golds)
        b1 = statistics.mean(bleu1(p, [g]) for p, g in zip(preds, golds))
        met = statistics.mean(meteor(p, g) for p, g in zip(preds, golds))
        rou = statistics.mean(rouge_l(p, g) for p, g in zip(preds, golds))
        cid = statistics.mean(cider(p, [g], idf) for p, g in zip(preds, golds))

        per_trial: dict = {}
        for r in bucket:
            slot = per_trial.setdefault(r.trial_id, {"pred": set(), "gold": set()})
            slot["pred"] |= parse_criterion(r.pred_text, schema)
            slot["gold"] |= parse_criterion(r.gold_text, schema)
        counts = []
        for slot in per_trial.values():
            row = compare_sets(slot["pred"], slot["gold"])
            row["union"] = len(slot["pred"] | slot["gold"])
            counts.append(row)
        micro = micro_scores(counts)
        reports.append(MetricReport(
            level=level, polarity=polarity, B1=b1, METEOR=met, ROUGE_L=rou,
            CIDEr=cid, n=len(bucket), group=group, **micro,
        ))
    return reports


def _pooled_micro(records, schema: AttributeSchema) -> dict:
    per_trial: dict = {}
    for r in records:
        slot = per_trial.setdefault((r.trial_id, r.polarity),
                                    {"pred": set(), "gold": set()})
        slot["pred"] |= parse_criterion(r.pred_text, schema)
        slot["gold"] |= parse_criterion(r.gold_text, schema)
    counts = []
    for slot in per_trial.values():
        row = compare_sets(slot["pred"], slot["gold"])
        row["union"] = len(slot["pred"] | slot["gold"])
        counts.append(row)
    return micro_scores(counts)


def score_records(records, level: str, schema: Optional[AttributeSchema] = None,
                  group_by_disease: bool = False) -> EvalResult:
    """Aggregate evaluation records into per-polarity (and per-group) reports."""
    schema = schema or default_schema()
    reports = _score_bucket(records, level, schema)
    result = EvalResult(reports=reports, records=records)
    requested = [r for r in records if r.requested_attribute is not None]
    if requested:
        result.instruction_following_rate = (
            sum(r.followed for r in requested) / len(requested)
        )
    result.pooled_micro = _pooled_micro(records, schema)
    if group_by_disease:
        by_group: dict = {}
        for r in records:
            by_group.setdefault(r.disease, []).append(r)
        group_reports = []
        for disease in sorted(by_group):
            group_reports += _score_bucket(by_group[disease], level, schema,
                                           group=disease)
        result.reports += group_reports
        summary: dict = {}
        for metric in ("B1", "METEOR", "ROUGE_L", "CIDEr", "F1"):
            values = [getattr(rep, metric) for rep in group_reports]
            if values:
                summary[metric] = {
                    "min": min(values),
                    "median": statistics.median(values),
                    "max": max(values),
                }
        result.group_summary = summary
    return result


def evaluate(state: ModelState, vocab: Vocabulary,
             store: Optional[KnowledgeStore], trials, split,
             gen_cfg: GenerationConfig, *, level: str = "criteria",
             schema: Optional[AttributeSchema] = None,
             group_by_disease: bool = False, prefix_len: int = 3,
             use_prompt: bool = True, use_exemplar: bool = True,
             max_requests: Optional[int] = None,
             instructions: Optional[set] = None) -> EvalResult:
    """Run generation over the test split and score it.

    Criteria level seeds decoding with the target block opener plus the first
    ``prefix_len`` gold tokens and scores the minimum-perplexity selection.
    Trial level greedily decodes the whole criteria list per trial and scores
    the per-polarity concatenations.
    """
    schema = schema or default_schema()
    test_trials = select_trials(trials, split.test)
    if not test_trials:
        raise ValueError("empty test split")

    records = []
    if level == "criteria":
        n_done = 0
        for trial in test_trials:
            for criterion in trial.criteria:
                tag = criterion.attribute
                if tag is None or tag not in state.registry:
                    continue
                if instructions is not None and tag not in instructions:
                    continue
                if max_requests is not None and n_done >= max_requests:
                    break
                gold_toks = words(criterion.text)
                block = "<incs>" if criterion.polarity == "inclusion" else "<excs>"
                prefix_tokens = [block, polarity_token(criterion.polarity)]
                prefix_tokens += gold_toks[:prefix_len]
                prefix_ids = vocab.encode_tokens(prefix_tokens)
                outcome = generate_criteria(
                    state, vocab, store, trial, tag, gen_cfg,
                    prefix_ids=prefix_ids, use_prompt=use_prompt,
                    use_exemplar=use_exemplar,
                )
                best, best_parse = None, None
                for cand, parse in sorted(
                    zip(outcome.selected, outcome.parses),
                    key=lambda cp: (cp[0].ppl, cp[0].index),
                ):
                    best, best_parse = cand, parse
                    break
                pred_text = ""
                if best_parse is not None and best_parse.target is not None:
                    pred_text = best_parse.target.text
                pred_relations = parse_criterion(pred_text, schema)
                followed = any(r.attribute == tag for r in pred_relations)
                records.append(EvalRecord(
                    trial_id=trial.trial_id, disease=trial.disease,
                    polarity=criterion.polarity, gold_text=criterion.text,
                    pred_text=pred_text,
                    requested_attribute=tag, followed=followed,
                ))
                n_done += 1
    elif level == "trial":
        for trial in test_trials:
            criteria, _ = generate_trial(state, vocab, store, trial, gen_cfg,
                                         use_exemplar=use_exemplar)
            for polarity in ("inclusion", "exclusion"):
                gold = " ".join(
                    c.text for c in trial.criteria if c.polarity == polarity
                )
                pred = " ".join(
                    c.text for c in criteria if c.polarity == polarity
                )
                records.append(EvalRecord(
                    trial_id=trial.trial_id, disease=trial.disease,
                    polarity=polarity, gold_text=gold, pred_text=pred,
                ))
    else:
        raise ValueError(f"unknown evaluation level {level!r}")

    return score_records(records, level, schema,
                         group_by_disease=group_by_disease)
