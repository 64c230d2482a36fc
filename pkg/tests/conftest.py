import pytest
import torch

from trialgen.corpus import (
    SynthConfig,
    extract_pairs,
    split_corpus,
    synthesize_corpus,
)
from trialgen.model import BackboneConfig, InstructionRegistry, init_model
from trialgen.textproto import Vocabulary

torch.set_num_threads(1)


def corpus_texts(trials):
    out = []
    for t in trials:
        out += [t.title, t.disease, t.treatment] + [c.text for c in t.criteria]
    return out


@pytest.fixture(scope="session")
def tiny_world():
    """Small corpus + vocab + untrained tiny model, shared across unit tests."""
    trials = synthesize_corpus(SynthConfig(n_trials=16, seed=5))
    split = split_corpus(trials, (0.72, 0.08, 0.20), seed=5)
    pairs = extract_pairs(trials, rationale_cap=2)
    tags = sorted({p.instruction for p in pairs})
    vocab = Vocabulary.build(corpus_texts(trials), instruction_tags=tags)
    config = BackboneConfig(
        n_layers=1, n_heads=2, d_model=32, d_ff=64, context_window=192,
        vocab_size=len(vocab), seed=5, d_prime=16, prompt_hidden=24,
    )
    state = init_model(config, InstructionRegistry(list(tags)))
    return {
        "trials": trials, "split": split, "pairs": pairs, "tags": tags,
        "vocab": vocab, "state": state,
    }
