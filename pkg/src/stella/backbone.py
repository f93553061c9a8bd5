"""Decoder-only pre-norm transformer with LoRA on a seeded frozen base."""
from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .lora import LoraLinear
from .normalization import RMSNorm
from .semantic_anchor import KINDS, SequenceLayout

Tensor = torch.Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    lora_r: int = 4
    lora_alpha: float = 8.0
    lora_dropout: float = 0.1
    frozen_seed: int = 1234

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.lora_r < 0:
            raise ValueError("lora_r must be >= 0")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")


def rotary(x: Tensor, base: float = 10000.0) -> Tensor:
    """Rotate consecutive feature pairs of ``x`` (... x N x d) by position-dependent angles."""
    n, d = x.shape[-2], x.shape[-1]
    inv = base ** (-torch.arange(0, d, 2, dtype=x.dtype) / d)
    ang = torch.arange(n, dtype=x.dtype)[:, None] * inv[None, :]
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def causal_mask(n: int) -> Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: BackboneConfig, generator: torch.Generator,
                 adapter_generator: torch.Generator | None = None):
        super().__init__()
        d, r, a, p = cfg.d_model, cfg.lora_r, cfg.lora_alpha, cfg.lora_dropout
        self.n_heads, self.d_head = cfg.n_heads, d // cfg.n_heads
        kw = dict(generator=generator, adapter_generator=adapter_generator)
        self.q_proj = LoraLinear(d, d, r, a, p, **kw)
        self.k_proj = LoraLinear(d, d, 0, **kw)
        self.v_proj = LoraLinear(d, d, r, a, p, **kw)
        self.o_proj = LoraLinear(d, d, 0, **kw)

    def _heads(self, x: Tensor) -> Tensor:
        n, t, _ = x.shape
        return x.view(n, t, self.n_heads, self.d_head).transpose(1, 2)

    def attention_weights(self, x: Tensor) -> Tensor:
        q = rotary(self._heads(self.q_proj(x)))
        k = rotary(self._heads(self.k_proj(x)))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores.masked_fill(~causal_mask(x.shape[1]), float("-inf"))
        return torch.softmax(scores, dim=-1)

    def forward(self, x: Tensor) -> Tensor:
        attn = self.attention_weights(x)
        out = attn @ self._heads(self.v_proj(x))
        return self.o_proj(out.transpose(1, 2).reshape(x.shape))


class FeedForward(nn.Module):
    def __init__(self, cfg: BackboneConfig, generator: torch.Generator):
        super().__init__()
        self.up = LoraLinear(cfg.d_model, cfg.d_ff, 0, bias=True, generator=generator)
        self.down = LoraLinear(cfg.d_ff, cfg.d_model, 0, bias=True, generator=generator)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(F.gelu(self.up(x)))


class TransformerLayer(nn.Module):
    """``H = X + MSA(RMSNorm(X))``; ``out = H + FFN(RMSNorm(H))``."""

    def __init__(self, cfg: BackboneConfig, generator: torch.Generator,
                 adapter_generator: torch.Generator | None = None):
        super().__init__()
        self.input_norm = RMSNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg, generator, adapter_generator)
        self.post_attention_norm = RMSNorm(cfg.d_model)
        self.ffn = FeedForward(cfg, generator)

    def forward(self, x: Tensor) -> Tensor:
        h = x + self.attn(self.input_norm(x))
        return h + self.ffn(self.post_attention_norm(h))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator().manual_seed(cfg.frozen_seed)
        # separate stream for adapter init: the frozen base is the same for every rank
        ga = torch.Generator().manual_seed(cfg.frozen_seed + 1)
        self.layers = nn.ModuleList(TransformerLayer(cfg, g, ga) for _ in range(cfg.n_layers))

    def run(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def forward(self, x: Tensor, layout: SequenceLayout) -> dict[str, Tensor]:
        """Run all layers, then keep only the patch-token positions of each component."""
        if x.shape[1] != layout.total:
            raise ValueError(f"input length {x.shape[1]} != layout length {layout.total}")
        h = self.run(x)
        return {k: layout.slice(h, f"tokens_{k}") for k in KINDS}

    def trainable_parameters(self) -> list[nn.Parameter]:
        return trainable_parameters(self)


def trainable_parameters(backbone: nn.Module) -> list[nn.Parameter]:
    """LoRA factors and RMSNorm gains; everything else stays frozen."""
    out = []
    for name, p in backbone.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        is_norm = name.endswith("norm.weight")
        if leaf in ("lora_A", "lora_B") or is_norm:
            out.append(p)
    return out


def frozen_state(module: nn.Module) -> dict[str, bytes]:
    """Raw bytes of every parameter that does not require gradients."""
    return {n: p.detach().cpu().numpy().tobytes() for n, p in module.named_parameters()
            if not p.requires_grad}


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest with base64 raw values
# ---------------------------------------------------------------------------


def save_checkpoint(module: nn.Module, path: str | Path, meta: dict | None = None) -> None:
    params = dict(module.named_parameters())
    entries = []
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().contiguous().numpy()
        frozen = name not in params or not params[name].requires_grad
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                        "frozen": frozen,
                        "data": base64.b64encode(arr.tobytes()).decode("ascii")})
    doc = {"version": CHECKPOINT_VERSION, "meta": meta or {}, "tensors": entries}
    Path(path).write_text(json.dumps(doc))


def read_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    state = {}
    for e in doc["tensors"]:
        arr = np.frombuffer(base64.b64decode(e["data"]), dtype=np.dtype(e["dtype"]))
        state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    return state, doc.get("meta", {})


def load_checkpoint(module: nn.Module, path: str | Path) -> dict:
    state, meta = read_checkpoint(path)
    module.load_state_dict(state, strict=True)
    return meta


def backbone_config_dict(cfg: BackboneConfig) -> dict:
    return asdict(cfg)
