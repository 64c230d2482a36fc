"""Decoder-only causal transformer plus the trainable instruction prompt table.

Embedding matrices are stored as ordered row blocks so instruction extension
can append fresh rows while old blocks stay frozen and bit-identical. Output
logits are computed only against blocks flagged generative: dynamically added
instruction tokens are prompt-only and can never be emitted, which is what
makes the no-forgetting guarantee exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .rng import derive_seed
from .textproto import PromptSequence, Segment


@dataclass
class BackboneConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    context_window: int = 256
    vocab_size: int = 0
    seed: int = 0
    # instruction prompt table
    d_prime: int = 64
    prompt_hidden: int = 128
    prompt_len: int = 1

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if not (0 < self.context_window <= 1024):
            raise ValueError("context_window must be in (0, 1024]")
        if self.vocab_size <= 0:
            raise ValueError("vocab_size must be positive")
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")


@dataclass
class InstructionRegistry:
    """Ordered instruction tags; a frozen prefix survives incremental updates."""

    tags: list = field(default_factory=list)
    frozen_prefix_len: int = 0

    def __post_init__(self):
        if len(set(self.tags)) != len(self.tags):
            raise ValueError("instruction tags must be unique")
        if not 0 <= self.frozen_prefix_len <= len(self.tags):
            raise ValueError("frozen_prefix_len out of range")

    def __len__(self) -> int:
        return len(self.tags)

    def __contains__(self, tag: str) -> bool:
        return tag in self.tags

    def index_of(self, tag: str) -> int:
        return self.tags.index(tag)


class BlockEmbedding(nn.Module):
    """Embedding matrix stored as appendable row blocks."""

    def __init__(self, n_rows: int, dim: int):
        super().__init__()
        self.blocks = nn.ParameterList(
            [nn.Parameter(torch.empty(n_rows, dim))]
        )
        self.generative = [True]
        self.dim = dim

    @property
    def n_rows(self) -> int:
        return sum(b.shape[0] for b in self.blocks)

    def weight(self) -> torch.Tensor:
        if len(self.blocks) == 1:
            return self.blocks[0]
        return torch.cat(list(self.blocks), dim=0)

    def generative_weight(self) -> torch.Tensor:
        kept = [b for b, g in zip(self.blocks, self.generative) if g]
        return kept[0] if len(kept) == 1 else torch.cat(kept, dim=0)

    def append_block(self, n_rows: int, generative: bool) -> nn.Parameter:
        p = nn.Parameter(torch.empty(n_rows, self.dim))
        self.blocks.append(p)
        self.generative.append(generative)
        return p


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x, attn_mask, past=None):
        # x: (B, T, d); attn_mask: (T_q, T_k) additive
        B, T, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)

        def heads(t):
            return t.view(B, -1, self.n_heads, self.d_head).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        if past is not None:
            pk, pv = past
            k = torch.cat([pk, k], dim=2)
            v = torch.cat([pv, v], dim=2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        att = att + attn_mask
        att = torch.softmax(att, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, -1, d)
        return self.proj(out), (k, v)


class TransformerBlock(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
        )

    def forward(self, x, attn_mask, past=None):
        a, kv = self.attn(self.ln1(x), attn_mask, past)
        x = x + a
        x = x + self.ff(self.ln2(x))
        return x, kv


class Backbone(nn.Module):
    """Pre-norm causal transformer; logits tied to the generative embeddings."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.emb = BlockEmbedding(cfg.vocab_size, cfg.d_model)
        self.pos = nn.Parameter(torch.empty(cfg.context_window, cfg.d_model))
        self.layers = nn.ModuleList(
            TransformerBlock(cfg) for _ in range(cfg.n_layers)
        )
        self.ln_f = nn.LayerNorm(cfg.d_model)

    def hidden_states(self, ids, prompt: Optional[torch.Tensor] = None,
                      prompt_attention: bool = True, past=None,
                      text_pos_offset: int = 0):
        """Final-layer hidden states; prompt vectors occupy the first positions.

        Text positions keep their own positional indices (the prompt carries no
        positional embedding), so a zeroed, attention-ablated prompt leaves
        text-position activations identical to the no-prompt forward. When a
        KV cache is passed, ``text_pos_offset`` must give the number of text
        tokens already fed.
        """
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        B, T = ids.shape
        past_len = 0 if past is None else past[0][0].shape[2]
        n_prompt = 0 if prompt is None else prompt.shape[1]
        if past_len + n_prompt + T > self.cfg.context_window:
            raise ValueError(
                f"sequence of {past_len + n_prompt + T} tokens overflows "
                f"context window {self.cfg.context_window}"
            )
        x = F.embedding(ids, self.emb.weight())
        pos_idx = torch.arange(text_pos_offset, text_pos_offset + T, device=ids.device)
        x = x + self.pos[pos_idx]
        if prompt is not None:
            x = torch.cat([prompt.expand(B, -1, -1), x], dim=1)

        total_q = x.shape[1]
        total_k = past_len + n_prompt + T if past is None else past_len + T
        # additive causal mask over (query, key); queries start at key offset
        offset = total_k - total_q
        qi = torch.arange(total_q).unsqueeze(1)
        ki = torch.arange(total_k).unsqueeze(0)
        mask = torch.where(ki <= qi + offset, 0.0, float("-inf"))
        if prompt is not None and not prompt_attention:
            # diagnostic switch: text queries ignore prompt keys
            mask = mask.clone()
            mask[n_prompt:, :n_prompt] = float("-inf")

        new_past = []
        for layer, layer_past in zip(
            self.layers, past if past is not None else [None] * len(self.layers)
        ):
            x, kv = layer(x, mask, layer_past)
            new_past.append(kv)
        return self.ln_f(x), new_past

    def logits_from_hidden(self, h: torch.Tensor) -> torch.Tensor:
        return h @ self.emb.generative_weight().t()


class NeuralPromptTable(nn.Module):
    """Instruction embedding rows projected through a small MLP."""

    def __init__(self, n_instructions: int, d_prime: int, hidden: int,
                 d_model: int, prompt_len: int):
        super().__init__()
        self.rows = BlockEmbedding(n_instructions, d_prime)
        self.mlp = nn.Sequential(
            nn.Linear(d_prime, hidden), nn.Tanh(), nn.Linear(hidden, d_model)
        )
        self.prompt_len = prompt_len

    def forward(self, index: int) -> torch.Tensor:
        n = self.rows.n_rows
        if not 0 <= index < n:
            raise IndexError(f"instruction index {index} out of range [0, {n})")
        row = self.rows.weight()[index]
        h = self.mlp(row)
        return h.unsqueeze(0).expand(self.prompt_len, -1)


@dataclass
class ModelState:
    config: BackboneConfig
    backbone: Backbone
    prompt: NeuralPromptTable
    registry: InstructionRegistry
    freeze: dict = field(default_factory=dict)

    def named_tensors(self) -> dict:
        out = {}
        for prefix, module in (("backbone", self.backbone), ("prompt", self.prompt)):
            for name, p in module.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out

    def trainable_tensors(self) -> dict:
        return {n: p for n, p in self.named_tensors().items()
                if not self.freeze.get(n, False)}

    def apply_freeze(self) -> None:
        for name, p in self.named_tensors().items():
            p.requires_grad_(not self.freeze.get(name, False))


def _init_tensor(p: torch.Tensor, gen: torch.Generator, kind: str) -> None:
    with torch.no_grad():
        if kind == "zeros":
            p.zero_()
        elif kind == "ones":
            p.fill_(1.0)
        elif kind == "embedding":
            p.uniform_(-0.08, 0.08, generator=gen)
        else:  # scaled uniform by fan-in
            bound = 1.0 / math.sqrt(p.shape[-1])
            p.uniform_(-bound, bound, generator=gen)


def _init_module(state: ModelState, gen: torch.Generator) -> None:
    for name, p in sorted(state.named_tensors().items()):
        if "ln" in name or "LayerNorm" in name:
            _init_tensor(p, gen, "ones" if name.endswith("weight") else "zeros")
        elif name.endswith("bias"):
            _init_tensor(p, gen, "zeros")
        elif ".emb." in name or name.endswith("pos") or ".rows." in name:
            _init_tensor(p, gen, "embedding")
        else:
            _init_tensor(p, gen, "fan_in")


def init_model(config: BackboneConfig, registry: InstructionRegistry) -> ModelState:
    """Deterministically initialized model; all parameters trainable."""
    config.validate()
    if len(registry) < 1:
        raise ValueError("registry must hold at least one instruction")
    backbone = Backbone(config)
    prompt = NeuralPromptTable(
        len(registry), config.d_prime, config.prompt_hidden,
        config.d_model, config.prompt_len,
    )
    state = ModelState(config, backbone, prompt, registry)
    gen = torch.Generator().manual_seed(derive_seed(config.seed, "init"))
    _init_module(state, gen)
    state.freeze = {name: False for name in state.named_tensors()}
    state.apply_freeze()
    return state


def embed_instruction(state: ModelState, index: int) -> torch.Tensor:
    """Prompt vectors (prompt_len, d_model) for one instruction index."""
    return state.prompt(index)


def forward(state: ModelState, seq: PromptSequence, use_prompt: bool,
            prompt_attention: bool = True) -> torch.Tensor:
    """Logits per position for one sequence (prompt positions included)."""
    ids = torch.tensor(seq.ids, dtype=torch.long)
    prompt = None
    if use_prompt:
        if seq.instruction_index is None:
            raise ValueError("use_prompt requires an instruction index")
        prompt = embed_instruction(state, seq.instruction_index).unsqueeze(0)
    h, _ = state.backbone.hidden_states(ids, prompt, prompt_attention)
    return state.backbone.logits_from_hidden(h)[0]


def loss_mask(seq: PromptSequence) -> list:
    """Positions whose NEXT token lies in a rationale/target segment."""
    segs = seq.segments
    return [
        i for i in range(len(segs) - 1)
        if segs[i + 1] in (Segment.RATIONALE, Segment.TARGET)
    ]


def token_nll(logits: torch.Tensor, targets: torch.Tensor,
              mask: torch.Tensor) -> torch.Tensor:
    """Per-position negative log-likelihood at masked positions (stable)."""
    if mask.sum() == 0:
        raise ValueError("empty loss mask")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll[mask]


def encoder_version(state: ModelState) -> str:
    """Fingerprint of the backbone weights that produce embeddings.

    Extension embedding blocks are excluded: they hold prompt-only tokens
    that never occur in encoded text, so training them must not invalidate
    existing store keys.
    """
    h = hashlib.sha256()
    for name, p in sorted(state.backbone.named_parameters()):
        if name.startswith("emb.blocks.") and not name.endswith("blocks.0"):
            continue
        h.update(name.encode())
        h.update(p.detach().numpy().astype("<f4").tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# checkpoint io: manifest + raw little-endian float32 blob


def save_checkpoint(state: ModelState, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    tensors = state.named_tensors()
    entries, offset = [], 0
    blob_path = os.path.join(path, "tensors.bin")
    with open(blob_path, "wb") as blob:
        for name in sorted(tensors):
            data = tensors[name].detach().numpy().astype("<f4").tobytes()
            entries.append(
                {"name": name, "shape": list(tensors[name].shape),
                 "dtype": "f32", "offset": offset, "nbytes": len(data)}
            )
            blob.write(data)
            offset += len(data)
    manifest = {
        "config": asdict(state.config),
        "registry": list(state.registry.tags),
        "frozen_prefix_len": state.registry.frozen_prefix_len,
        "freeze": state.freeze,
        "emb_blocks": [int(b.shape[0]) for b in state.backbone.emb.blocks],
        "emb_generative": list(state.backbone.emb.generative),
        "row_blocks": [int(b.shape[0]) for b in state.prompt.rows.blocks],
        "tensors": entries,
        "blob_bytes": offset,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str) -> ModelState:
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    config = BackboneConfig(**manifest["config"])
    registry = InstructionRegistry(
        manifest["registry"], manifest["frozen_prefix_len"]
    )
    backbone = Backbone(config)
    prompt = NeuralPromptTable(
        manifest["row_blocks"][0], config.d_prime, config.prompt_hidden,
        config.d_model, config.prompt_len,
    )
    # recreate extension blocks before loading weights
    first = manifest["emb_blocks"][0]
    if first != config.vocab_size:
        raise ValueError("manifest emb block inconsistent with config")
    for n_rows, gen in zip(manifest["emb_blocks"][1:],
                           manifest["emb_generative"][1:]):
        backbone.emb.append_block(n_rows, gen)
    for n_rows in manifest["row_blocks"][1:]:
        prompt.rows.append_block(n_rows, generative=True)

    state = ModelState(config, backbone, prompt, registry, dict(manifest["freeze"]))
    tensors = state.named_tensors()
    blob_path = os.path.join(path, "tensors.bin")
    actual = os.path.getsize(blob_path)
    if actual != manifest["blob_bytes"]:
        raise ValueError(
            f"checkpoint blob is {actual} bytes, manifest says {manifest['blob_bytes']}"
        )
    import numpy as np

    with open(blob_path, "rb") as blob:
        for entry in manifest["tensors"]:
            name = entry["name"]
            if name not in tensors:
                raise ValueError(f"manifest tensor {name} missing from model")
            blob.seek(entry["offset"])
            raw = blob.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise ValueError(f"checkpoint blob truncated at tensor {name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
            with torch.no_grad():
                tensors[name].copy_(torch.from_numpy(arr))
    state.apply_freeze()
    return state


def parameter_count(state: ModelState) -> int:
    return sum(p.numel() for p in state.named_tensors().values())
