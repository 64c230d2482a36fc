import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialgen.corpus import Criterion, Exemplar, SynthConfig, synthesize_corpus
from trialgen.textproto import (
    CORE_TOKENS,
    POLARITY_TOKENS,
    STRUCTURE_TOKENS,
    ContextOverflowError,
    Segment,
    UnknownInstructionError,
    Vocabulary,
    assemble_prompt,
    assemble_target,
    build_sequence,
    canonicalize_scheme,
    parse_output,
    render_exemplar,
    words,
)

TRIALS = synthesize_corpus(SynthConfig(n_trials=8, seed=13))


def _vocab():
    texts = []
    for t in TRIALS:
        texts += [t.title, t.disease, t.treatment] + [c.text for c in t.criteria]
    texts.append("Age 60 years or older")
    return Vocabulary.build(texts, instruction_tags=("age", "bmi", "nyha"))


VOCAB = _vocab()


def test_special_tokens_occupy_lowest_ids():
    specials = list(CORE_TOKENS) + list(STRUCTURE_TOKENS) + list(POLARITY_TOKENS)
    for i, tok in enumerate(specials):
        assert VOCAB.token_of(i) == tok
    assert VOCAB.n_special == len(specials) + 3  # three instruction tags
    assert VOCAB.token_of(VOCAB.n_special - 1) == "<nyha>"


def test_tokenize_detokenize_roundtrip_appendix_phrase():
    ids = VOCAB.tokenize("Age 60 years or older")
    assert VOCAB.detokenize(ids) == "age 60 years or older"


def test_tokenize_empty_and_unk():
    assert VOCAB.tokenize("") == []
    assert VOCAB.tokenize("zzyzx")[0] == VOCAB.unk_id


@given(st.lists(st.sampled_from(
    "age bmi the of kg m2 18 60 ( ) years and".split()), min_size=1, max_size=12))
@settings(max_examples=60, deadline=None)
def test_roundtrip_on_known_words(tokens):
    text = " ".join(tokens)
    ids = VOCAB.tokenize(text)
    assert VOCAB.detokenize(ids) == " ".join(words(text))


def test_vocab_file_roundtrip(tmp_path):
    path = tmp_path / "vocab.txt"
    VOCAB.save(path)
    back = Vocabulary.load(path)
    assert back.size == VOCAB.size
    assert back.n_special == VOCAB.n_special
    assert all(back.token_of(i) == VOCAB.token_of(i) for i in range(VOCAB.size))


def test_assemble_prompt_layout_and_order():
    trial = TRIALS[0]
    ids, segs = assemble_prompt(VOCAB, trial, None, "bmi")
    toks = [VOCAB.token_of(i) for i in ids]
    assert toks[0] == "<title>"
    assert toks[-3:] == ["<instr>", "<bmi>", "</instr>"]
    assert segs[-3:] == [Segment.INSTRUCTION] * 3
    assert set(segs[:-3]) == {Segment.SETUP}

    exemplar = Exemplar(
        chain=[Criterion("age is above 18 yrs old", "inclusion")],
        instruction="age",
        target=Criterion("age is above 18 yrs old", "inclusion"),
    )
    ids2, segs2 = assemble_prompt(VOCAB, trial, exemplar, "bmi")
    toks2 = [VOCAB.token_of(i) for i in ids2]
    assert "<ref>" in toks2 and "</ref>" in toks2
    assert toks2.index("<ref>") < toks2.index("</ref>") < len(toks2) - 3
    ids3, _ = assemble_prompt(VOCAB, trial, exemplar, "bmi",
                              instruction_first=True)
    toks3 = [VOCAB.token_of(i) for i in ids3]
    assert toks3.index("</instr>") < toks3.index("<ref>")


def test_assemble_prompt_truncates_exemplar_front_only():
    trial = TRIALS[0]
    chain = [Criterion("age is above 18 yrs old", "inclusion")] * 8
    exemplar = Exemplar(chain=chain)
    full_ids, _ = assemble_prompt(VOCAB, trial, exemplar, "bmi")
    setup_ids, _ = assemble_prompt(VOCAB, trial, None, "bmi")
    budget = len(setup_ids) + 10
    ids, segs = assemble_prompt(VOCAB, trial, exemplar, "bmi", budget=budget)
    assert len(ids) <= budget
    toks = [VOCAB.token_of(i) for i in ids]
    # setup and instruction intact, exemplar head dropped
    assert toks[0] == "<title>"
    assert toks[-3:] == ["<instr>", "<bmi>", "</instr>"]
    assert toks.count("<ref>") == 1
    full_toks = [VOCAB.token_of(i) for i in full_ids]
    kept_exemplar = [t for t, s in zip(toks, segs) if s == Segment.EXEMPLAR][1:]
    assert kept_exemplar == full_toks[len(full_toks) - 3 - len(kept_exemplar):-3]


def test_assemble_prompt_unknown_instruction():
    with pytest.raises(UnknownInstructionError, match="qtc"):
        assemble_prompt(VOCAB, TRIALS[0], None, "qtc")


def test_assemble_prompt_deterministic():
    a = assemble_prompt(VOCAB, TRIALS[1], None, "age")
    b = assemble_prompt(VOCAB, TRIALS[1], None, "age")
    assert a == b


def test_assemble_target_empty_chain():
    target = Criterion("age is above 18 yrs old", "inclusion")
    ids, segs = assemble_target(VOCAB, [], target, msr=True)
    toks = [VOCAB.token_of(i) for i in ids]
    assert toks[0] == "<incs>" and toks[1] == "<inc>"
    assert toks[-2:] == ["</incs>", "<eos>"]
    assert set(segs) == {Segment.TARGET}


def test_assemble_target_msr_flag():
    rationale = [Criterion("bmi above 30 kg/m2", "inclusion")] * 3
    target = Criterion("age is above 18 yrs old", "inclusion")
    with_msr, segs = assemble_target(VOCAB, rationale, target, msr=True)
    without, _ = assemble_target(VOCAB, rationale, target, msr=False)
    assert len(without) < len(with_msr)
    toks = [VOCAB.token_of(i) for i in without]
    assert "<incs>" == toks[0]  # rationale absent
    assert Segment.RATIONALE in set(segs)


def test_assemble_target_appendix_exclusion_form():
    target = Criterion("heart failure ( nyha class iii and iv )", "exclusion")
    ids, _ = assemble_target(VOCAB, [], target, msr=True)
    toks = [VOCAB.token_of(i) for i in ids]
    assert toks[0] == "<excs>" and toks[1] == "<exc>"
    assert toks[-2:] == ["</excs>", "<eos>"]
    assert " ".join(toks[2:-2]) == "heart failure ( nyha class iii and iv )"


def _norm(text):
    return " ".join(words(text))


def test_parse_output_roundtrip_on_synthetic():
    for trial in TRIALS[:4]:
        rationale = trial.criteria[:2]
        target = trial.criteria[-1]
        ids, _ = assemble_target(VOCAB, rationale, target, msr=True)
        parsed = parse_output(VOCAB, ids)
        assert parsed.target is not None and not parsed.unterminated
        assert parsed.target.polarity == target.polarity
        assert parsed.target.text == _norm(target.text)
        assert [c.text for c in parsed.rationale] == [
            _norm(c.text) for c in rationale
        ]
        assert [c.polarity for c in parsed.rationale] == [
            c.polarity for c in rationale
        ]


def test_parse_output_no_block():
    ids = VOCAB.encode_tokens(
        ["<inc>"] + words("age is above 18 yrs old") + ["<exc>"]
        + words("pregnant or breastfeeding women") + ["<eos>"]
    )
    parsed = parse_output(VOCAB, ids)
    assert parsed.target is None
    assert [c.polarity for c in parsed.rationale] == ["inclusion", "exclusion"]


def test_parse_output_unterminated_block():
    target = Criterion("age is above 18 yrs old", "inclusion")
    ids, _ = assemble_target(VOCAB, [], target, msr=True)
    close_id = VOCAB.id_of("</incs>")
    truncated = [i for i in ids if i != close_id]
    parsed = parse_output(VOCAB, truncated)
    assert parsed.target is not None
    assert parsed.unterminated
    assert parsed.target.text == _norm(target.text)


def test_segment_masks_partition_every_position():
    trial = TRIALS[2]
    seq = build_sequence(
        VOCAB, trial, None, "age", trial.criteria[:2], trial.criteria[-1],
        context_window=192, msr=True,
    )
    assert len(seq.segments) == len(seq.ids)
    assert all(isinstance(s, Segment) for s in seq.segments)
    assert len(seq.input_segments) == len(seq.input_ids)
    assert len(seq.target_segments) == len(seq.target_ids)


def test_build_sequence_overflow_error():
    trial = TRIALS[0]
    with pytest.raises(ContextOverflowError):
        build_sequence(
            VOCAB, trial, None, "age", trial.criteria * 10, trial.criteria[0],
            context_window=64, msr=True,
        )


def test_scheme_alias_equivalence():
    """Both spellings of the token scheme yield identical ids after
    normalization through the one alias table."""
    # target side: legacy flat <target> wrapper vs canonical block form
    for polarity, text in (
        ("inclusion", "age is above 18 yrs old"),
        ("exclusion", "heart failure ( nyha class iii and iv )"),
    ):
        legacy = ["<target>"] + words(text) + ["</target>", "<eos>"]
        rewritten = canonicalize_scheme(legacy, polarity)
        canonical, _ = assemble_target(
            VOCAB, [], Criterion(text, polarity), msr=True
        )
        assert VOCAB.encode_tokens(rewritten) == canonical

    # instruction wrapper: <statement> is a straight rename of <instr>
    legacy_instr = ["<statement>", "<age>", "</statement>"]
    assert VOCAB.encode_tokens(canonicalize_scheme(legacy_instr, "inclusion")) \
        == VOCAB.encode_tokens(["<instr>", "<age>", "</instr>"])
