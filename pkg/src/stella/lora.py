"""Low-rank adapters on a frozen linear map."""
from __future__ import annotations

import math
from contextlib import contextmanager

import torch
import torch.nn as nn
import torch.nn.functional as F

Tensor = torch.Tensor


class LoraLinear(nn.Module):
    """``y = x W0^T + b0 + (alpha / r) * drop(x) A^T B^T``.

    ``W0`` (and ``b0``) are frozen unless ``base_trainable`` is set. ``B``
    starts at zero, so a fresh adapter leaves the base map untouched. ``r = 0``
    disables the adapter entirely. Passing ``adapter_generator`` keeps the
    draws for ``A`` off the base stream, so ``W0`` does not depend on ``r``.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        r: int = 4,
        alpha: float = 8.0,
        dropout: float = 0.0,
        bias: bool = False,
        base_trainable: bool = False,
        generator: torch.Generator | None = None,
        adapter_generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.adapters_enabled = True
        if r < 0:
            raise ValueError(f"LoRA rank must be >= 0, got {r}")
        self.in_features, self.out_features = in_features, out_features
        self.r, self.alpha, self.dropout = r, alpha, dropout
        bound = 1.0 / math.sqrt(in_features)
        w0 = torch.empty(out_features, in_features).uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(w0, requires_grad=base_trainable)
        if bias:
            b0 = torch.empty(out_features).uniform_(-bound, bound, generator=generator)
            self.bias = nn.Parameter(b0, requires_grad=base_trainable)
        else:
            self.register_parameter("bias", None)
        if r > 0:
            a = torch.empty(r, in_features).uniform_(-bound, bound,
                                                     generator=adapter_generator or generator)
            self.lora_A = nn.Parameter(a)
            self.lora_B = nn.Parameter(torch.zeros(out_features, r))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)

    @property
    def scale(self) -> float:
        return self.alpha / self.r if self.r else 0.0

    def adapter_parameter_count(self) -> int:
        return self.r * (self.in_features + self.out_features)

    def base(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def delta(self, x: Tensor) -> Tensor:
        x = F.dropout(x, self.dropout, self.training)
        return F.linear(F.linear(x, self.lora_A), self.lora_B) * self.scale

    def forward(self, x: Tensor) -> Tensor:
        out = self.base(x)
        if self.r and self.adapters_enabled:
            out = out + self.delta(x)
        return out

    def extra_repr(self) -> str:
        return f"{self.in_features}->{self.out_features}, r={self.r}, alpha={self.alpha}"


def lora_parameters(module: nn.Module) -> list[nn.Parameter]:
    return [p for n, p in module.named_parameters() if n.endswith(("lora_A", "lora_B"))]


@contextmanager
def disable_adapters(module: nn.Module):
    """Run every :class:`LoraLinear` inside ``module`` as its base map only."""
    layers = [m for m in module.modules() if isinstance(m, LoraLinear)]
    saved = [m.adapters_enabled for m in layers]
    for m in layers:
        m.adapters_enabled = False
    try:
        yield module
    finally:
        for m, flag in zip(layers, saved):
            m.adapters_enabled = flag
