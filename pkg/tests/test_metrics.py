import math

import pytest

from trialgen.metrics import (
    CiderIDF,
    EvalRecord,
    MetricReport,
    bleu1,
    build_cider_idf,
    cider,
    clinical_accuracy,
    meteor,
    micro_scores,
    rouge_l,
    score_records,
    stem,
)

# ---------------------------------------------------------------------------
# frozen hand-computed fixtures (values derived on paper from the definitions;
# all pre-scaling, i.e. score / 100)

FIXTURES = [
    # (metric, candidate, reference, expected raw value)
    # clipped precision 1/3, c=3 > r=2 so BP=1
    ("bleu1", "a a a", "a b", 1 / 3),
    # precision 1 ("the" clipped at 1 of 2), BP = exp(1 - 6/3) = e^-1
    ("bleu1", "the cat sat", "the cat sat on the mat", math.exp(-1.0)),
    # LCS=3, P=3/4, R=1, beta=1.2: F = 2.44*0.75/(1+1.44*0.75)
    ("rouge_l", "a b c d", "a c d", 2.44 * 0.75 / (1 + 1.44 * 0.75)),
    # identical: m=3, F=1, chunks=1, penalty=0.5/27 -> 53/54
    ("meteor", "the cat sat", "the cat sat", 53 / 54),
    # stem-stage match only: m=1, F=1, chunks=1, penalty=0.5
    ("meteor", "ages", "age", 0.5),
]


@pytest.mark.parametrize("metric,cand,ref,expected", FIXTURES)
def test_frozen_hand_fixtures(metric, cand, ref, expected):
    fn = {"bleu1": lambda c, r: bleu1(c.split(), [r.split()]),
          "rouge_l": lambda c, r: rouge_l(c.split(), r.split()),
          "meteor": lambda c, r: meteor(c.split(), r.split())}[metric]
    assert fn(cand, ref) / 100.0 == pytest.approx(expected, abs=1e-6)


def test_identity_inputs_score_maximal():
    toks = "age is above 18 yrs old".split()
    assert bleu1(toks, [toks]) == pytest.approx(100.0)
    assert rouge_l(toks, toks) == pytest.approx(100.0)
    assert meteor(toks, toks) == pytest.approx(100.0 * (1 - 0.5 / len(toks) ** 3))


def test_disjoint_inputs_score_zero():
    a, b = "x y z".split(), "p q r".split()
    assert bleu1(a, [b]) == 0.0
    assert rouge_l(a, b) == 0.0
    assert meteor(a, b) == 0.0


def test_empty_candidate_scores_zero():
    assert bleu1([], ["a".split()]) == 0.0
    assert rouge_l([], "a".split()) == 0.0
    assert meteor([], "a".split()) == 0.0


def test_meteor_chunk_penalty_hand_case():
    # alignment (0,0)(1,1)(2,3)(3,2)(4,4): m=5, chunks=4
    cand = "the cat sat on mat".split()
    ref = "the cat on sat mat".split()
    expected = 1.0 * (1 - 0.5 * (4 / 5) ** 3)
    assert meteor(cand, ref) / 100.0 == pytest.approx(expected, abs=1e-6)


def test_stemmer_rules():
    assert stem("ages") == "age"
    assert stem("age") == "age"
    assert stem("running") == "runn"
    assert stem("es") == "es"  # too short to strip


def _cider_corpus():
    return [
        "a b c d e".split(),
        "a b x y z".split(),
        "q r s t u".split(),
    ]


def test_cider_self_similarity_is_ten():
    docs = _cider_corpus()
    idf = build_cider_idf(docs)
    assert cider(docs[0], [docs[0]], idf) == pytest.approx(10.0, abs=1e-9)


def test_cider_disjoint_zero():
    docs = _cider_corpus()
    idf = build_cider_idf(docs)
    assert cider("m n o p".split(), [docs[0]], idf) == pytest.approx(0.0)


def test_cider_reference_order_invariance():
    docs = _cider_corpus()
    idf = build_cider_idf(docs)
    cand = "a b c y z".split()
    assert cider(cand, [docs[0], docs[1]], idf) == pytest.approx(
        cider(cand, [docs[1], docs[0]], idf), abs=1e-12
    )


def test_cider_matches_independent_vector_oracle():
    """Explicit-loop TF-IDF cosine recomputation on a 3-sentence fixture."""
    docs = _cider_corpus()
    idf = build_cider_idf(docs)
    cand = "a b c d q".split()
    refs = [docs[0], docs[1]]

    def oracle():
        n_docs = len(docs)
        per_n = []
        for n in range(1, 5):
            def grams(toks):
                out = {}
                for i in range(len(toks) - n + 1):
                    g = tuple(toks[i : i + n])
                    out[g] = out.get(g, 0) + 1
                return out

            def idf_of(g):
                df = sum(
                    1 for d in docs
                    if any(tuple(d[i : i + n]) == g
                           for i in range(len(d) - n + 1))
                )
                return math.log(n_docs / df) if df else math.log(n_docs)

            cg = grams(cand)
            sims = []
            for ref in refs:
                rg = grams(ref)
                keys = set(cg) | set(rg)
                dot = sum(cg.get(g, 0) * rg.get(g, 0) * idf_of(g) ** 2
                          for g in keys)
                na = math.sqrt(sum((v * idf_of(g)) ** 2 for g, v in cg.items()))
                nb = math.sqrt(sum((v * idf_of(g)) ** 2 for g, v in rg.items()))
                sims.append(dot / (na * nb) if na and nb else 0.0)
            per_n.append(sum(sims) / len(sims))
        return 10.0 * sum(per_n) / 4

    assert cider(cand, refs, idf) == pytest.approx(oracle(), abs=1e-6)


# ---------------------------------------------------------------------------
# clinical accuracy


def test_micro_scores_two_trial_fixture():
    counts = [
        {"tp": 2, "fp": 1, "fn": 1, "union": 4},
        {"tp": 1, "fp": 0, "fn": 1, "union": 2},
    ]
    scores = micro_scores(counts)
    assert scores["P"] == pytest.approx(3 / 4)
    assert scores["R"] == pytest.approx(3 / 5)
    assert scores["micro_Jaccard"] == pytest.approx(3 / 6)
    p, r = 3 / 4, 3 / 5
    assert scores["F1"] == pytest.approx(2 * p * r / (p + r))


def test_micro_is_pooled_not_mean_of_per_trial():
    counts = [
        {"tp": 1, "fp": 0, "fn": 0, "union": 1},   # per-trial P = 1
        {"tp": 0, "fp": 3, "fn": 1, "union": 4},   # per-trial P = 0
    ]
    scores = micro_scores(counts)
    assert scores["P"] == pytest.approx(1 / 4)     # pooled, not 0.5


def test_clinical_accuracy_perfect_and_split_polarity():
    gold = [{
        "inclusion": ["age is above 18 yrs old", "bmi above 30 kg/m2"],
        "exclusion": ["pregnant or breastfeeding women"],
    }]
    scores = clinical_accuracy(gold, gold)
    for pol in ("inclusion", "exclusion"):
        for key in ("P", "R", "F1", "micro_Jaccard"):
            assert scores[pol][key] == pytest.approx(1.0)


def test_clinical_accuracy_mixed_fixture():
    pred = [{
        "inclusion": ["age is above 18 yrs old", "bmi above 30 kg/m2",
                      "QTc > 500 ms on the screening ecg"],
        "exclusion": [],
    }]
    gold = [{
        "inclusion": ["age is above 18 yrs old", "bmi above 30 kg/m2",
                      "hemoglobin below 10 g/dL"],
        "exclusion": ["pregnant or breastfeeding women"],
    }]
    scores = clinical_accuracy(pred, gold)
    inc = scores["inclusion"]
    assert inc["P"] == pytest.approx(2 / 3)
    assert inc["R"] == pytest.approx(2 / 3)
    assert inc["micro_Jaccard"] == pytest.approx(2 / 4)
    exc = scores["exclusion"]
    assert exc["R"] == 0.0


def test_clinical_accuracy_zero_gold_errors():
    with pytest.raises(ValueError, match="undefined|no relations"):
        clinical_accuracy([{"inclusion": ["x"], "exclusion": []}],
                          [{"inclusion": ["consent form signed"], "exclusion": []}])


# ---------------------------------------------------------------------------
# record scoring / grouping


def _perfect_records():
    rows = []
    for i, disease in enumerate(["Alzheimer Disease", "Plaque Psoriasis"]):
        text_inc = "age is above 18 yrs old"
        text_exc = "pregnant or breastfeeding women"
        rows.append(EvalRecord(f"T{i}", disease, "inclusion", text_inc,
                               text_inc, "age", True))
        rows.append(EvalRecord(f"T{i}", disease, "exclusion", text_exc,
                               text_exc, "pregnancy", True))
    return rows


def test_perfect_records_score_maximal():
    result = score_records(_perfect_records(), "criteria")
    assert result.instruction_following_rate == 1.0
    assert result.pooled_micro["F1"] == pytest.approx(1.0)
    for rep in result.reports:
        assert rep.B1 == pytest.approx(100.0)
        assert rep.F1 == pytest.approx(1.0)
        assert rep.level == "criteria"


def test_grouping_emits_per_disease_reports():
    result = score_records(_perfect_records(), "criteria",
                           group_by_disease=True)
    grouped = [r for r in result.reports if r.group is not None]
    diseases = {r.group for r in grouped}
    assert diseases == {"Alzheimer Disease", "Plaque Psoriasis"}
    total_overall = sum(r.n for r in result.reports if r.group is None)
    total_grouped = sum(r.n for r in grouped)
    assert total_overall == total_grouped == 4
    assert set(result.group_summary) == {"B1", "METEOR", "ROUGE_L", "CIDEr", "F1"}
    for stats in result.group_summary.values():
        assert stats["min"] <= stats["median"] <= stats["max"]


def test_report_scaling_invariants():
    result = score_records(_perfect_records(), "criteria")
    for rep in result.reports:
        assert 0 <= rep.B1 <= 100
        assert 0 <= rep.METEOR <= 100
        assert 0 <= rep.ROUGE_L <= 100
        assert 0 <= rep.P <= 1 and 0 <= rep.F1 <= 1
        if rep.P + rep.R > 0:
            assert rep.F1 == pytest.approx(
                2 * rep.P * rep.R / (rep.P + rep.R), abs=1e-9
            )
