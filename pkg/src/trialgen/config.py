"""Run configuration: JSON file + flag overrides, profiles, validation.

The ``paper`` profile records the published training hyperparameters; the
``desk`` profile (the default) scales everything to a single CPU core.
Unknown keys are rejected and cross-field checks report every violation at
once.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .generation import GenerationConfig
from .model import BackboneConfig
from .training import OptimizerConfig


@dataclass
class DataConfig:
    min_frequency: int = 1
    exemplar_chain_len: int = 3
    rationale_cap: Optional[int] = None
    samples_per_trial: Optional[int] = None
    store_chain_len: int = 3
    retrieval_k: int = 1
    instruction_first: bool = False
    msr: bool = True
    use_exemplar: bool = True
    use_prompt: bool = True


@dataclass
class EvalConfig:
    level: str = "criteria"
    group_by_disease: bool = False
    prefix_len: int = 3
    max_requests: Optional[int] = None


@dataclass
class PathsConfig:
    corpus: Optional[str] = None
    split: Optional[str] = None
    checkpoint: Optional[str] = None
    store: Optional[str] = None
    out: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    profile: str = "desk"
    n_trials: int = 200
    ratios: tuple = (0.72, 0.08, 0.20)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        learning_rate=5e-5, weight_decay=1e-4, batch_size=64, epochs=5))
    finetune: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        learning_rate=5e-5, weight_decay=1e-5, batch_size=16, epochs=10))
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ratios"] = list(self.ratios)
        return d


PROFILES = {
    # paper-stage hyperparameters, recorded as documented defaults
    "paper": {
        "backbone": {"context_window": 1024},
        "pretrain": {"learning_rate": 5e-5, "weight_decay": 1e-4,
                     "batch_size": 64, "epochs": 5},
        "finetune": {"learning_rate": 5e-5, "weight_decay": 1e-5,
                     "batch_size": 16, "epochs": 10},
    },
    # single-core desk scale
    "desk": {
        "backbone": {"n_layers": 2, "n_heads": 4, "d_model": 128, "d_ff": 512,
                     "context_window": 256},
        "pretrain": {"learning_rate": 1e-3, "weight_decay": 1e-4,
                     "batch_size": 32, "epochs": 30},
        "finetune": {"learning_rate": 1e-3, "weight_decay": 1e-5,
                     "batch_size": 16, "epochs": 12},
        "data": {"rationale_cap": 3, "exemplar_chain_len": 2,
                 "store_chain_len": 2},
        "generation": {"Q": 8, "k_q": 3, "k_s": 20, "max_new_tokens": 48},
    },
}

ENV_CONFIG_VAR = "TRIALGEN_CONFIG"


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _apply_section(obj, updates: dict, section: str, problems: list):
    known = {f.name for f in dataclasses.fields(obj)}
    for key, value in updates.items():
        if key not in known:
            problems.append(f"unknown key {section}.{key}" if section else
                            f"unknown key {key}")
            continue
        setattr(obj, key, value)


def build_config(raw: dict) -> RunConfig:
    """Profile defaults, then file keys, then validation; flags come later."""
    problems: list = []
    profile = raw.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError([f"unknown profile {profile!r}"])
    cfg = RunConfig(profile=profile)
    for section, updates in PROFILES[profile].items():
        _apply_section(getattr(cfg, section), updates, section, problems)

    sections = {f.name for f in dataclasses.fields(RunConfig)}
    nested = {"backbone", "pretrain", "finetune", "generation", "data",
              "eval", "paths"}
    for key, value in raw.items():
        if key not in sections:
            problems.append(f"unknown key {key}")
        elif key in nested:
            if not isinstance(value, dict):
                problems.append(f"section {key} must be a mapping")
            else:
                _apply_section(getattr(cfg, key), value, key, problems)
        elif key == "ratios":
            cfg.ratios = tuple(value)
        elif key != "profile":
            setattr(cfg, key, value)

    problems += cross_checks(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def cross_checks(cfg: RunConfig) -> list:
    problems = []
    g, b = cfg.generation, cfg.backbone
    if not 1 <= g.k_q <= g.Q:
        problems.append(f"generation: need k_q <= Q, got k_q={g.k_q} Q={g.Q}")
    if g.k_s < 1:
        problems.append("generation: k_s must be >= 1")
    if g.temperature <= 0:
        problems.append("generation: temperature must be positive")
    if b.d_model % b.n_heads != 0:
        problems.append(
            f"backbone: d_model={b.d_model} not divisible by n_heads={b.n_heads}"
        )
    if not 0 < b.context_window <= 1024:
        problems.append("backbone: context_window must be in (0, 1024]")
    if g.max_new_tokens >= b.context_window:
        problems.append("generation: max_new_tokens must fit the context window")
    for stage_name in ("pretrain", "finetune"):
        stage = getattr(cfg, stage_name)
        try:
            stage.validate()
        except ValueError as exc:
            problems.append(f"{stage_name}: {exc}")
    if len(cfg.ratios) != 3 or abs(sum(cfg.ratios) - 1.0) > 1e-9:
        problems.append(f"ratios must be three numbers summing to 1, got {cfg.ratios}")
    if cfg.threads < 1:
        problems.append("threads must be >= 1")
    return problems


def validate_config(path: Optional[str] = None) -> RunConfig:
    """Load and normalize a config file; empty/missing file = desk defaults."""
    raw: dict = {}
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR)
    if path:
        with open(path, encoding="utf-8") as fh:
            content = fh.read().strip()
        raw = json.loads(content) if content else {}
        if not isinstance(raw, dict):
            raise ConfigError(["config file must hold a JSON object"])
    return build_config(raw)
