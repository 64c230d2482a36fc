"""Command-line entry point wiring data, training, store, generation,
evaluation, and lifecycle experiments.

Every command reads an optional JSON config (flags win), writes its artifacts
under --out, and drops a manifest (resolved config, seed, version, input
digests) sufficient to reproduce the run bit-identically.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import sys

import torch

from . import __version__
from .config import ENV_CONFIG_VAR, ConfigError, RunConfig, build_config, cross_checks
from .corpus import (
    DatasetSplit,
    SynthConfig,
    build_pretrain_set,
    extract_pairs,
    ingest_registry,
    load_corpus,
    save_corpus,
    select_trials,
    split_corpus,
    synthesize_corpus,
)
from .criteria_parser import default_schema
from .embedstore import KnowledgeStore, build_store
from .generation import generate_criteria, generate_trial
from .lifecycle import ablation_harness, continual_harness, extend_instructions, incremental_update
from .metrics import evaluate
from .model import (
    BackboneConfig,
    InstructionRegistry,
    encoder_version,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from .textproto import Vocabulary, polarity_token, words
from .training import grad_check, finetune, pretrain

log = logging.getLogger(__name__)

COMMANDS = (
    "synth", "ingest", "split", "pretrain", "finetune", "store",
    "generate", "evaluate", "extend", "continual", "ablate", "gradcheck",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _version_string() -> str:
    v = f"trialgen {__version__}"
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0 and out.stdout.strip():
            v += "+" + out.stdout.strip()
    except OSError:
        pass
    return v


def write_manifest(out_dir: str, command: str, cfg: RunConfig,
                   inputs, outputs) -> None:
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": _version_string(),
        "inputs": {p: _sha256(p) for p in sorted(inputs) if p},
        "outputs": sorted(outputs),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _corpus_texts(trials):
    for t in trials:
        yield t.title
        yield t.disease
        yield t.treatment
        for c in t.criteria:
            yield c.text


def _load_model(checkpoint: str):
    state = load_checkpoint(checkpoint)
    vocab = Vocabulary.load(os.path.join(checkpoint, "vocab.txt"))
    return state, vocab


def _save_model(state, vocab, out_dir: str) -> str:
    ckpt = os.path.join(out_dir, "checkpoint")
    save_checkpoint(state, ckpt)
    vocab.save(os.path.join(ckpt, "vocab.txt"))
    return ckpt


def _registry_from(args, trials) -> InstructionRegistry:
    if getattr(args, "instructions", None):
        tags = [t for t in args.instructions.split(",") if t]
    else:
        tags = sorted({p.instruction for p in extract_pairs(trials)})
    if not tags:
        raise ValueError("no instruction tags found for the registry")
    return InstructionRegistry(tags)


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# subcommand implementations


def cmd_synth(args, cfg: RunConfig) -> list:
    trials = synthesize_corpus(SynthConfig(n_trials=cfg.n_trials, seed=cfg.seed))
    save_corpus(trials, os.path.join(args.out, "corpus.jsonl"))
    return ["corpus.jsonl"]


def cmd_ingest(args, cfg: RunConfig) -> list:
    trials = ingest_registry(args.input)
    save_corpus(trials, os.path.join(args.out, "corpus.jsonl"))
    return ["corpus.jsonl"]


def cmd_split(args, cfg: RunConfig) -> list:
    trials = load_corpus(cfg.paths.corpus)
    split = split_corpus(trials, cfg.ratios, cfg.seed)
    split.to_file(os.path.join(args.out, "split.json"))
    return ["split.json"]


def cmd_pretrain(args, cfg: RunConfig) -> list:
    trials = load_corpus(cfg.paths.corpus)
    split = DatasetSplit.from_file(cfg.paths.split)
    train_trials = select_trials(trials, split.train)
    registry = _registry_from(args, trials)
    vocab = Vocabulary.build(
        _corpus_texts(trials), instruction_tags=registry.tags,
        min_frequency=cfg.data.min_frequency,
    )
    bcfg = dataclasses.replace(cfg.backbone, vocab_size=len(vocab), seed=cfg.seed)
    state = init_model(bcfg, registry)
    samples = build_pretrain_set(
        train_trials, seed=cfg.seed,
        exemplar_chain_len=cfg.data.exemplar_chain_len,
        rationale_cap=cfg.data.rationale_cap,
        samples_per_trial=cfg.data.samples_per_trial,
    )
    log_path = os.path.join(args.out, "pretrain_log.jsonl")
    pretrain(state, samples, cfg.pretrain, vocab, msr=cfg.data.msr,
             use_exemplar=cfg.data.use_exemplar, log_path=log_path)
    _save_model(state, vocab, args.out)
    return ["pretrain_log.jsonl", "checkpoint/manifest.json",
            "checkpoint/tensors.bin", "checkpoint/vocab.txt"]


def cmd_store(args, cfg: RunConfig) -> list:
    trials = load_corpus(cfg.paths.corpus)
    split = DatasetSplit.from_file(cfg.paths.split)
    state, vocab = _load_model(cfg.paths.checkpoint)
    store = build_store(select_trials(trials, split.train), state, vocab,
                        chain_len=cfg.data.store_chain_len)
    store.persist(os.path.join(args.out, "store.jsonl"))
    return ["store.jsonl"]


def cmd_finetune(args, cfg: RunConfig) -> list:
    trials = load_corpus(cfg.paths.corpus)
    split = DatasetSplit.from_file(cfg.paths.split)
    state, vocab = _load_model(cfg.paths.checkpoint)
    store = None
    if cfg.data.use_exemplar:
        if not cfg.paths.store:
            raise ValueError("finetune with exemplars needs --store")
        store = KnowledgeStore.load(cfg.paths.store,
                                    expected_encoder_version=encoder_version(state))
    trials_by_id = {t.trial_id: t for t in trials}
    pairs = [
        p for p in extract_pairs(select_trials(trials, split.train),
                                 rationale_cap=cfg.data.rationale_cap)
        if p.instruction in state.registry
    ]
    log_path = os.path.join(args.out, "finetune_log.jsonl")
    finetune(state, pairs, store, cfg.finetune, vocab, trials_by_id,
             msr=cfg.data.msr, use_exemplar=cfg.data.use_exemplar,
             use_prompt=cfg.data.use_prompt, log_path=log_path)
    _save_model(state, vocab, args.out)
    return ["finetune_log.jsonl", "checkpoint/manifest.json",
            "checkpoint/tensors.bin", "checkpoint/vocab.txt"]


def cmd_generate(args, cfg: RunConfig) -> list:
    trials = load_corpus(cfg.paths.corpus)
    state, vocab = _load_model(cfg.paths.checkpoint)
    store = None
    if cfg.paths.store and cfg.data.use_exemplar:
        store = KnowledgeStore.load(cfg.paths.store,
                                    expected_encoder_version=encoder_version(state))
    by_id = {t.trial_id: t for t in trials}
    if args.trial_id not in by_id:
        raise ValueError(f"trial {args.trial_id!r} not in corpus")
    trial = by_id[args.trial_id]
    gen_cfg = dataclasses.replace(cfg.generation, seed=cfg.seed)
    if args.instruction:
        prefix_ids = ()
        if args.prefix:
            block = "<incs>" if args.prefix_polarity == "inclusion" else "<excs>"
            toks = [block, polarity_token(args.prefix_polarity)] + words(args.prefix)
            prefix_ids = vocab.encode_tokens(toks)
        outcome = generate_criteria(
            state, vocab, store, trial, args.instruction, gen_cfg,
            prefix_ids=prefix_ids, use_prompt=cfg.data.use_prompt,
            use_exemplar=cfg.data.use_exemplar,
            instruction_first=cfg.data.instruction_first,
        )
        rows = [outcome.report()]
    else:
        criteria, outcome = generate_trial(
            state, vocab, store, trial, gen_cfg,
            use_exemplar=cfg.data.use_exemplar,
        )
        row = outcome.report()
        row["criteria"] = [
            {"text": c.text, "polarity": c.polarity} for c in criteria
        ]
        rows = [row]
    _write_jsonl(os.path.join(args.out, "generation.jsonl"), rows)
    return ["generation.jsonl"]


def _format_report_table(reports) -> str:
    headers = ("level", "polarity", "group", "n", "B1", "METEOR", "ROUGE_L",
               "CIDEr", "P", "R", "F1", "micro_Jaccard")
    lines = ["\t".join(headers)]
    for rep in reports:
        d = rep.to_dict()
        lines.append("\t".join(
            f"{d[h]:.4f}" if isinstance(d[h], float) else str(d[h])
            for h in headers
        ))
    return "\n".join(lines) + "\n"


def cmd_evaluate(args, cfg: RunConfig) -> list:
    trials = load_corpus(cfg.paths.corpus)
    split = DatasetSplit.from_file(cfg.paths.split)
    state, vocab = _load_model(cfg.paths.checkpoint)
    store = None
    if cfg.paths.store and cfg.data.use_exemplar:
        store = KnowledgeStore.load(cfg.paths.store,
                                    expected_encoder_version=encoder_version(state))
    gen_cfg = dataclasses.replace(cfg.generation, seed=cfg.seed)
    result = evaluate(
        state, vocab, store, trials, split, gen_cfg,
        level=cfg.eval.level, group_by_disease=cfg.eval.group_by_disease,
        prefix_len=cfg.eval.prefix_len, use_prompt=cfg.data.use_prompt,
        use_exemplar=cfg.data.use_exemplar, max_requests=cfg.eval.max_requests,
    )
    outs = ["reports.jsonl", "records.jsonl", "report_table.txt", "summary.json"]
    _write_jsonl(os.path.join(args.out, "reports.jsonl"),
                 [r.to_dict() for r in result.reports])
    _write_jsonl(os.path.join(args.out, "records.jsonl"),
                 [dataclasses.asdict(r) for r in result.records])
    with open(os.path.join(args.out, "report_table.txt"), "w") as fh:
        fh.write(_format_report_table(result.reports))
    summary = {
        "instruction_following_rate": result.instruction_following_rate,
        "pooled_micro": result.pooled_micro,
        "group_summary": result.group_summary,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if cfg.eval.group_by_disease:
        rows = [
            {"group": r.group, "polarity": r.polarity, "metric": m,
             "value": getattr(r, m)}
            for r in result.reports if r.group is not None
            for m in ("B1", "METEOR", "ROUGE_L", "CIDEr", "F1")
        ]
        _write_jsonl(os.path.join(args.out, "plotdata.jsonl"), rows)
        outs.append("plotdata.jsonl")
    return outs


def cmd_extend(args, cfg: RunConfig) -> list:
    state, vocab = _load_model(cfg.paths.checkpoint)
    new_tags = [t for t in args.new_tags.split(",") if t]
    extend_instructions(state, vocab, new_tags)
    _save_model(state, vocab, args.out)
    return ["checkpoint/manifest.json", "checkpoint/tensors.bin",
            "checkpoint/vocab.txt"]


def cmd_continual(args, cfg: RunConfig) -> list:
    trials = load_corpus(cfg.paths.corpus)
    split = DatasetSplit.from_file(cfg.paths.split)
    state, vocab = _load_model(cfg.paths.checkpoint)
    pairs = extract_pairs(select_trials(trials, split.train),
                          rationale_cap=cfg.data.rationale_cap)
    gen_cfg = dataclasses.replace(cfg.generation, seed=cfg.seed)
    result = continual_harness(
        trials, split, state, vocab, pairs, cfg.finetune, gen_cfg,
        n_subsets=args.subsets, seed=cfg.seed,
        store_chain_len=cfg.data.store_chain_len,
        max_eval_requests=cfg.eval.max_requests,
    )
    _write_jsonl(os.path.join(args.out, "curves.jsonl"), result["curves"])
    _write_jsonl(os.path.join(args.out, "training_manifest.jsonl"),
                 result["manifest"])
    with open(os.path.join(args.out, "subsets.json"), "w") as fh:
        json.dump(result["subsets"], fh, indent=2)
        fh.write("\n")
    return ["curves.jsonl", "training_manifest.jsonl", "subsets.json"]


def cmd_ablate(args, cfg: RunConfig) -> list:
    trials = load_corpus(cfg.paths.corpus)
    split = DatasetSplit.from_file(cfg.paths.split)
    train_trials = select_trials(trials, split.train)
    registry = _registry_from(args, trials)
    vocab = Vocabulary.build(
        _corpus_texts(trials), instruction_tags=registry.tags,
        min_frequency=cfg.data.min_frequency,
    )
    bcfg = dataclasses.replace(cfg.backbone, vocab_size=len(vocab), seed=cfg.seed)
    samples = build_pretrain_set(
        train_trials, seed=cfg.seed,
        exemplar_chain_len=cfg.data.exemplar_chain_len,
        rationale_cap=cfg.data.rationale_cap,
        samples_per_trial=cfg.data.samples_per_trial,
    )
    pairs = [
        p for p in extract_pairs(train_trials, rationale_cap=cfg.data.rationale_cap)
        if p.instruction in registry
    ]
    gen_cfg = dataclasses.replace(cfg.generation, seed=cfg.seed)
    results = ablation_harness(
        trials, split, vocab,
        make_model=lambda: init_model(dataclasses.replace(bcfg),
                                      InstructionRegistry(list(registry.tags))),
        samples=samples, pairs=pairs, pre_cfg=cfg.pretrain, ft_cfg=cfg.finetune,
        gen_cfg=gen_cfg, store_chain_len=cfg.data.store_chain_len,
        max_eval_requests=cfg.eval.max_requests,
    )
    rows = []
    for variant, result in results.items():
        for rep in result.reports:
            row = rep.to_dict()
            row["variant"] = variant
            rows.append(row)
        rows.append({
            "variant": variant,
            "instruction_following_rate": result.instruction_following_rate,
            "pooled_micro": result.pooled_micro,
        })
    _write_jsonl(os.path.join(args.out, "ablation_reports.jsonl"), rows)
    return ["ablation_reports.jsonl"]


def cmd_gradcheck(args, cfg: RunConfig) -> list:
    from .training import build_finetune_sequences

    trials = synthesize_corpus(SynthConfig(n_trials=6, seed=cfg.seed))
    registry = InstructionRegistry(sorted({p.instruction
                                           for p in extract_pairs(trials)}))
    vocab = Vocabulary.build(_corpus_texts(trials), instruction_tags=registry.tags)
    bcfg = BackboneConfig(
        n_layers=1, n_heads=2, d_model=16, d_ff=32, context_window=128,
        vocab_size=len(vocab), seed=cfg.seed, d_prime=8, prompt_hidden=16,
    )
    state = init_model(bcfg, registry)
    pairs = extract_pairs(trials, rationale_cap=1)[:2]
    seqs = build_finetune_sequences(
        pairs, {t.trial_id: t for t in trials}, None, state, vocab,
        use_exemplar=False,
    )
    result = grad_check(state, seqs, n_probes=args.probes, seed=cfg.seed,
                        margin=args.margin)
    with open(os.path.join(args.out, "gradcheck.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"gradcheck max relative error: {result['max_rel_error']:.3e}")
    return ["gradcheck.json"]


# --------------------------------------------------------------------------
# argument wiring


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (TRIALGEN_CONFIG honored)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--profile", choices=("desk", "paper"))
    p.add_argument("--out", required=True, help="output directory")


_FLAG_MAP = {
    # flag dest -> (section, key)
    "corpus": ("paths", "corpus"), "split_file": ("paths", "split"),
    "checkpoint": ("paths", "checkpoint"), "store_file": ("paths", "store"),
    "n_trials": (None, "n_trials"),
    "epochs": ("stage", "epochs"), "learning_rate": ("stage", "learning_rate"),
    "batch_size": ("stage", "batch_size"), "weight_decay": ("stage", "weight_decay"),
    "margin": ("stage", "margin"), "clip_norm": ("stage", "clip_norm"),
    "level": ("eval", "level"), "max_requests": ("eval", "max_requests"),
    "prefix_len": ("eval", "prefix_len"),
    "group_by_disease": ("eval", "group_by_disease"),
    "k_s": ("generation", "k_s"), "candidates": ("generation", "Q"),
    "k_q": ("generation", "k_q"),
    "max_new_tokens": ("generation", "max_new_tokens"),
    "temperature": ("generation", "temperature"),
    "no_exemplar": ("data", "use_exemplar"),
    "no_prompt": ("data", "use_prompt"),
    "no_msr": ("data", "msr"),
    "rationale_cap": ("data", "rationale_cap"),
    "samples_per_trial": ("data", "samples_per_trial"),
    "d_model": ("backbone", "d_model"), "n_layers": ("backbone", "n_layers"),
    "n_heads": ("backbone", "n_heads"), "d_ff": ("backbone", "d_ff"),
    "context_window": ("backbone", "context_window"),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="trialgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **kwargs):
        p = sub.add_parser(name, **kwargs)
        _add_common(p)
        return p

    p = add("synth", help="synthesize a trial corpus with gold relations")
    p.add_argument("--n-trials", dest="n_trials", type=int)

    p = add("ingest", help="ingest a registry export")
    p.add_argument("--input", required=True)

    p = add("split", help="deterministic train/valid/test split")
    p.add_argument("--corpus", dest="corpus")
    p.add_argument("--ratios", help="three comma-separated fractions")

    for name in ("pretrain", "finetune"):
        p = add(name, help=f"{name} the model")
        p.add_argument("--corpus", dest="corpus")
        p.add_argument("--split", dest="split_file")
        if name == "finetune":
            p.add_argument("--checkpoint", dest="checkpoint")
            p.add_argument("--store", dest="store_file")
            p.add_argument("--no-prompt", dest="no_prompt", action="store_true", default=None)
        else:
            p.add_argument("--instructions", help="comma-separated registry tags")
            p.add_argument("--samples-per-trial", dest="samples_per_trial", type=int)
            for flag, dest in (("--d-model", "d_model"), ("--n-layers", "n_layers"),
                               ("--n-heads", "n_heads"), ("--d-ff", "d_ff"),
                               ("--context-window", "context_window")):
                p.add_argument(flag, dest=dest, type=int)
        p.add_argument("--epochs", dest="epochs", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--margin", dest="margin", type=float)
        p.add_argument("--clip-norm", dest="clip_norm", type=float)
        p.add_argument("--rationale-cap", dest="rationale_cap", type=int)
        p.add_argument("--no-msr", dest="no_msr", action="store_true", default=None)
        p.add_argument("--no-exemplar", dest="no_exemplar", action="store_true", default=None)

    p = add("store", help="build the exemplar knowledge store")
    p.add_argument("--corpus", dest="corpus")
    p.add_argument("--split", dest="split_file")
    p.add_argument("--checkpoint", dest="checkpoint")

    p = add("generate", help="generate criteria for one trial")
    p.add_argument("--corpus", dest="corpus")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--store", dest="store_file")
    p.add_argument("--trial-id", required=True)
    p.add_argument("--instruction", help="attribute tag; omit for trial level")
    p.add_argument("--prefix", help="seed the criterion with these words")
    p.add_argument("--prefix-polarity", choices=("inclusion", "exclusion"),
                   default="inclusion")
    p.add_argument("--k-s", dest="k_s", type=int)
    p.add_argument("--candidates", dest="candidates", type=int)
    p.add_argument("--k-q", dest="k_q", type=int)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)
    p.add_argument("--temperature", dest="temperature", type=float)
    p.add_argument("--no-exemplar", dest="no_exemplar", action="store_true", default=None)
    p.add_argument("--no-prompt", dest="no_prompt", action="store_true", default=None)

    p = add("evaluate", help="run the evaluation protocol")
    p.add_argument("--corpus", dest="corpus")
    p.add_argument("--split", dest="split_file")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--store", dest="store_file")
    p.add_argument("--level", choices=("criteria", "trial"))
    p.add_argument("--max-requests", dest="max_requests", type=int)
    p.add_argument("--prefix-len", dest="prefix_len", type=int)
    p.add_argument("--group-by-disease", dest="group_by_disease",
                   action="store_true", default=None)
    p.add_argument("--no-exemplar", dest="no_exemplar", action="store_true", default=None)
    p.add_argument("--no-prompt", dest="no_prompt", action="store_true", default=None)

    p = add("extend", help="register new instruction tags")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--new-tags", required=True)

    p = add("continual", help="continual-learning harness")
    p.add_argument("--corpus", dest="corpus")
    p.add_argument("--split", dest="split_file")
    p.add_argument("--checkpoint", dest="checkpoint")
    p.add_argument("--subsets", type=int, default=4)
    p.add_argument("--max-requests", dest="max_requests", type=int)

    p = add("ablate", help="ablation harness over the four variants")
    p.add_argument("--corpus", dest="corpus")
    p.add_argument("--split", dest="split_file")
    p.add_argument("--instructions")
    p.add_argument("--max-requests", dest="max_requests", type=int)

    p = add("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--margin", type=float, default=2.0)

    return parser


def _apply_flags(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    stage = "pretrain" if args.command == "pretrain" else "finetune"
    for dest, (section, key) in _FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest in ("no_exemplar", "no_prompt", "no_msr"):
            value = not value
        if section is None:
            setattr(cfg, key, value)
        elif section == "stage":
            setattr(getattr(cfg, stage), key, value)
        else:
            setattr(getattr(cfg, section), key, value)
    if getattr(args, "ratios", None):
        cfg.ratios = tuple(float(x) for x in args.ratios.split(","))
    problems = cross_checks(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


_HANDLERS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "split": cmd_split,
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "store": cmd_store,
    "generate": cmd_generate, "evaluate": cmd_evaluate, "extend": cmd_extend,
    "continual": cmd_continual, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config_path = getattr(args, "config", None) or os.environ.get(ENV_CONFIG_VAR)
        raw = {}
        if config_path:
            with open(config_path, encoding="utf-8") as fh:
                content = fh.read().strip()
            raw = json.loads(content) if content else {}
        if args.profile:
            raw["profile"] = args.profile
        cfg = build_config(raw)
        cfg = _apply_flags(cfg, args)
    except (UsageError, ConfigError, json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"trialgen: error: {exc}", file=sys.stderr)
        return 1

    torch.set_num_threads(cfg.threads)
    os.makedirs(args.out, exist_ok=True)
    try:
        outputs = _HANDLERS[args.command](args, cfg)
        inputs = [
            getattr(args, "config", None), cfg.paths.corpus, cfg.paths.split,
            cfg.paths.store, getattr(args, "input", None),
        ]
        inputs = [p for p in inputs if p and os.path.isfile(p)]
        if cfg.paths.checkpoint and os.path.isdir(cfg.paths.checkpoint):
            inputs += [
                os.path.join(cfg.paths.checkpoint, f)
                for f in ("manifest.json", "tensors.bin", "vocab.txt")
            ]
        write_manifest(args.out, args.command, cfg, inputs,
                       outputs + ["manifest.json"])
        return 0
    except (ValueError, KeyError, OSError) as exc:
        print(f"trialgen: runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(dispatch(sys.argv[1:]))
