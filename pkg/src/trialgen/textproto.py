"""Vocabulary, special tokens, and deterministic prompt/target assembly.

The token scheme wraps trial setups, retrieved exemplars, instructions, and
reasoning chains in dedicated markers. One alias table maps the legacy
spelling of the scheme (``<statement>`` wrappers and a flat ``<target>``
marker) onto the canonical block form, so both spellings assemble to the same
ids.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

from .corpus import Criterion, Exemplar, TrialDocument

CORE_TOKENS = ("<unk>", "<pad>", "<bos>", "<eos>")
STRUCTURE_TOKENS = (
    "<title>", "<disease>", "<treatment>", "<ref>", "</ref>",
    "<instr>", "</instr>", "<incs>", "</incs>", "<excs>", "</excs>",
)
POLARITY_TOKENS = ("<inc>", "<exc>")

# Legacy scheme spelling -> canonical tokens. ``<target>`` expands by target
# polarity; everything else is a straight rename.
SCHEME_ALIASES = {
    "<statement>": "<instr>",
    "</statement>": "</instr>",
    "<target>": {"inclusion": ("<incs>", "<inc>"), "exclusion": ("<excs>", "<exc>")},
    "</target>": {"inclusion": ("</incs>",), "exclusion": ("</excs>",)},
}

_WORD_RE = re.compile(r"\d+\.\d+|\w+|[^\w\s]")


def instruction_token(tag: str) -> str:
    return f"<{tag}>"


def words(text: str) -> list:
    """Lowercased word/punctuation tokens; the tokenizer's segmentation."""
    return _WORD_RE.findall(text.lower().replace("²", "2"))


def canonicalize_scheme(tokens, polarity: str) -> list:
    """Rewrite legacy-spelled special tokens to the canonical scheme."""
    out = []
    for tok in tokens:
        alias = SCHEME_ALIASES.get(tok)
        if alias is None:
            out.append(tok)
        elif isinstance(alias, str):
            out.append(alias)
        else:
            out.extend(alias[polarity])
    return out


class Vocabulary:
    """Token <-> id bijection; special tokens first, ids dense in [0, size)."""

    def __init__(self, tokens, n_special: int):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens")
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        self.n_special = n_special
        for required in CORE_TOKENS:
            if required not in self._ids:
                raise ValueError(f"missing required token {required}")

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, texts, instruction_tags=(), min_frequency: int = 1) -> "Vocabulary":
        """Word-level vocabulary over ``texts`` with the full special set first."""
        specials = (
            list(CORE_TOKENS)
            + list(STRUCTURE_TOKENS)
            + list(POLARITY_TOKENS)
            + [instruction_token(t) for t in instruction_tags]
        )
        counts: dict = {}
        for text in texts:
            for w in words(text):
                counts[w] = counts.get(w, 0) + 1
        body = sorted(w for w, c in counts.items() if c >= min_frequency)
        return cls(specials + body, n_special=len(specials))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# n_special={self.n_special}\n")
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            n_special = int(header.split("=", 1)[1])
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        vocab = cls(tokens, n_special)
        for tok in tokens[n_special:]:
            # dynamically registered instruction tokens sit past the base
            # special range; word tokens can never take the <...> shape
            if re.fullmatch(r"</?[a-z0-9_]+>", tok):
                vocab._dynamic_specials.add(tok)
        return vocab

    # -- queries -----------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self._ids["<unk>"])

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def unk_id(self) -> int:
        return self._ids["<unk>"]

    @property
    def pad_id(self) -> int:
        return self._ids["<pad>"]

    @property
    def eos_id(self) -> int:
        return self._ids["<eos>"]

    def is_special(self, idx: int) -> bool:
        tok = self._tokens[idx]
        return (
            idx < self.n_special
            or tok in self._dynamic_specials
        )

    # -- mutation (dynamic instruction tokens only) -------------------------

    @property
    def _dynamic_specials(self) -> set:
        if not hasattr(self, "_dyn"):
            self._dyn: set = set()
        return self._dyn

    def add_special(self, token: str) -> int:
        """Register a new special token in the dynamic (trailing) id range."""
        if token in self._ids:
            return self._ids[token]
        self._tokens.append(token)
        self._ids[token] = len(self._tokens) - 1
        self._dynamic_specials.add(token)
        return self._ids[token]

    # -- text <-> ids --------------------------------------------------------

    def tokenize(self, text: str) -> list:
        return [self.id_of(w) for w in words(text)]

    def encode_tokens(self, tokens) -> list:
        return [self.id_of(t) for t in tokens]

    def detokenize(self, ids) -> str:
        return " ".join(self._tokens[i] for i in ids)


class Segment(IntEnum):
    SETUP = 0
    EXEMPLAR = 1
    INSTRUCTION = 2
    RATIONALE = 3
    TARGET = 4


@dataclass
class PromptSequence:
    """Tokenized conditioning text plus target, with per-position segments."""

    input_ids: list
    target_ids: list
    input_segments: list
    target_segments: list
    instruction_index: Optional[int] = None

    @property
    def ids(self) -> list:
        return self.input_ids + self.target_ids

    @property
    def segments(self) -> list:
        return self.input_segments + self.target_segments

    def __len__(self) -> int:
        return len(self.input_ids) + len(self.target_ids)


class UnknownInstructionError(KeyError):
    pass


class ContextOverflowError(ValueError):
    pass


def polarity_token(polarity: str) -> str:
    return "<inc>" if polarity == "inclusion" else "<exc>"


def render_setup(trial: TrialDocument) -> list:
    toks = ["<title>"] + words(trial.title)
    toks += ["<disease>"] + words(trial.disease)
    toks += ["<treatment>"] + words(trial.treatment)
    return toks


def render_exemplar(exemplar: Exemplar) -> list:
    toks = ["<ref>"]
    for c in exemplar.chain:
        toks.append(polarity_token(c.polarity))
        toks += words(c.text)
    if exemplar.instruction is not None:
        toks += ["<instr>", instruction_token(exemplar.instruction), "</instr>"]
    if exemplar.target is not None:
        toks += words(exemplar.target.text)
    toks.append("</ref>")
    return toks


def render_instruction(tag: str) -> list:
    return ["<instr>", instruction_token(tag), "</instr>"]


def assemble_prompt(vocab: Vocabulary, trial: TrialDocument,
                    exemplar: Optional[Exemplar], instruction: Optional[str],
                    budget: Optional[int] = None,
                    instruction_first: bool = False) -> tuple:
    """Input-side tokens: setup ++ exemplar ++ instruction (canonical order).

    When ``budget`` is exceeded the exemplar is truncated from its front;
    the setup and instruction blocks are never cut.
    """
    if instruction is not None and instruction_token(instruction) not in vocab:
        raise UnknownInstructionError(
            f"instruction tag {instruction!r} is not registered"
        )
    setup = render_setup(trial)
    instr = render_instruction(instruction) if instruction is not None else []
    exem = render_exemplar(exemplar) if exemplar is not None else []

    if budget is not None and exem:
        fixed = len(setup) + len(instr)
        if fixed + len(exem) > budget:
            keep = budget - fixed - 1  # room for the <ref> marker itself
            exem = ["<ref>"] + exem[len(exem) - keep :] if keep > 0 else []
    parts = (
        [(setup, Segment.SETUP), (instr, Segment.INSTRUCTION), (exem, Segment.EXEMPLAR)]
        if instruction_first
        else [(setup, Segment.SETUP), (exem, Segment.EXEMPLAR), (instr, Segment.INSTRUCTION)]
    )
    tokens, segments = [], []
    for toks, seg in parts:
        tokens += toks
        segments += [seg] * len(toks)
    if budget is not None and len(tokens) > budget:
        raise ContextOverflowError(
            f"setup+instruction occupy {len(tokens)} tokens, budget {budget}"
        )
    return vocab.encode_tokens(tokens), segments


def assemble_target(vocab: Vocabulary, rationale, target: Criterion,
                    msr: bool = True) -> tuple:
    """Target-side tokens: optional reasoning chain, then the wrapped target."""
    tokens, segments = [], []
    if msr:
        for c in rationale:
            ctoks = [polarity_token(c.polarity)] + words(c.text)
            tokens += ctoks
            segments += [Segment.RATIONALE] * len(ctoks)
    block_open = "<incs>" if target.polarity == "inclusion" else "<excs>"
    block_close = "</incs>" if target.polarity == "inclusion" else "</excs>"
    ttoks = [block_open, polarity_token(target.polarity)] + words(target.text)
    ttoks += [block_close, "<eos>"]
    tokens += ttoks
    segments += [Segment.TARGET] * len(ttoks)
    return vocab.encode_tokens(tokens), segments


def build_sequence(vocab: Vocabulary, trial: TrialDocument,
                   exemplar: Optional[Exemplar], instruction: Optional[str],
                   rationale, target: Criterion, *,
                   context_window: int, reserve: int = 0, msr: bool = True,
                   instruction_first: bool = False,
                   instruction_index: Optional[int] = None) -> PromptSequence:
    """Full training sequence that fits ``context_window`` minus ``reserve``."""
    target_ids, target_segs = assemble_target(vocab, rationale, target, msr=msr)
    budget = context_window - reserve - len(target_ids)
    if budget <= 0:
        raise ContextOverflowError(
            f"target side occupies {len(target_ids)} tokens, window {context_window}"
        )
    input_ids, input_segs = assemble_prompt(
        vocab, trial, exemplar, instruction, budget=budget,
        instruction_first=instruction_first,
    )
    return PromptSequence(input_ids, target_ids, input_segs, target_segs,
                          instruction_index=instruction_index)


@dataclass
class ParseResult:
    rationale: list
    target: Optional[Criterion]
    unterminated: bool = False


def parse_output(vocab: Vocabulary, ids) -> ParseResult:
    """Inverse of assemble_target; degenerate outputs yield target=None."""
    ids = list(ids)
    tokens = [vocab.token_of(i) for i in ids]
    rationale = []
    target: Optional[Criterion] = None
    unterminated = False

    i = 0
    current_pol: Optional[str] = None
    current_words: list = []

    def flush():
        nonlocal current_pol, current_words
        if current_pol is not None and current_words:
            rationale.append(Criterion(" ".join(current_words), current_pol))
        current_pol, current_words = None, []

    while i < len(tokens):
        tok = tokens[i]
        if tok == "<eos>":
            break
        if tok in ("<incs>", "<excs>"):
            flush()
            polarity = "inclusion" if tok == "<incs>" else "exclusion"
            close = "</incs>" if tok == "<incs>" else "</excs>"
            i += 1
            content = []
            closed = False
            while i < len(tokens):
                t = tokens[i]
                if t == close:
                    closed = True
                    break
                if t == "<eos>":
                    break
                if not vocab.is_special(ids[i]):
                    content.append(t)
                i += 1
            if content:
                target = Criterion(" ".join(content), polarity)
                unterminated = not closed
            break
        if tok == "<inc>" or tok == "<exc>":
            flush()
            current_pol = "inclusion" if tok == "<inc>" else "exclusion"
        elif not vocab.is_special(ids[i]):
            current_words.append(tok)
        i += 1
    flush()
    return ParseResult(rationale, target, unterminated)
