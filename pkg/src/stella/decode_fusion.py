"""Per-component forecasting heads and gated recomposition."""
from __future__ import annotations

import json

import torch
import torch.nn as nn
import torch.nn.functional as F

from .lora import LoraLinear
from .normalization import RMSNorm
from .semantic_anchor import KINDS

Tensor = torch.Tensor


class ComponentHead(nn.Module):
    """``Y = Proj_H(Z + MLP(RMSNorm(Z)))`` with the MLP shared across patches.

    ``Proj_H`` flattens all ``P_n`` tokens and maps ``P_n * D`` to ``H``.
    """

    def __init__(self, n_patches: int, d_model: int, horizon: int, hidden: int | None = None,
                 lora_r: int = 8, lora_alpha: float = 16.0, lora_dropout: float = 0.1,
                 base_trainable: bool = True, generator: torch.Generator | None = None):
        super().__init__()
        hidden = hidden or d_model
        kw = dict(r=lora_r, alpha=lora_alpha, dropout=lora_dropout, bias=True,
                  base_trainable=base_trainable, generator=generator)
        self.norm = RMSNorm(d_model)
        self.fc1 = LoraLinear(d_model, hidden, **kw)
        self.fc2 = LoraLinear(hidden, d_model, **kw)
        self.proj = LoraLinear(n_patches * d_model, horizon, **kw)
        self.horizon = horizon

    def residual(self, z: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(self.norm(z))))

    def forward(self, z: Tensor, n_channels: int) -> Tensor:
        """(B*C) x P_n x D -> B x H x C."""
        bc = z.shape[0]
        if bc % n_channels:
            raise ValueError(f"{bc} rows cannot be split into {n_channels} channels")
        y = self.proj((z + self.residual(z)).reshape(bc, -1))
        return y.view(bc // n_channels, n_channels, self.horizon).transpose(1, 2)


class GatedFusion(nn.Module):
    """``G_c = W_base + MLP_gate(F_c)``, ``Y_c = sum_k G_c[..., k] * Y_c^(k)``.

    ``F_c`` is the sum of the three component forecasts for channel ``c``; the
    gate network is shared by all channels and its last layer starts at zero.
    """

    def __init__(self, horizon: int, hidden: int | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        hidden = hidden or max(horizon // 4, 16)
        self.horizon = horizon
        self.w_base = nn.Parameter(torch.ones(3))
        self.fc1 = nn.Linear(horizon, hidden)
        self.fc2 = nn.Linear(hidden, 3 * horizon)
        bound = horizon ** -0.5
        with torch.no_grad():
            self.fc1.weight.uniform_(-bound, bound, generator=generator)
            self.fc1.bias.uniform_(-bound, bound, generator=generator)
            self.fc2.weight.zero_()
            self.fc2.bias.zero_()

    def gates(self, components: list[Tensor]) -> Tensor:
        b, h, c = components[0].shape
        f = (components[0] + components[1] + components[2]).transpose(1, 2)  # B x C x H
        dg = self.fc2(F.gelu(self.fc1(f))).view(b, c, h, 3).transpose(1, 2)  # B x H x C x 3
        return self.w_base + dg

    def forward(self, yt: Tensor, ys: Tensor, yr: Tensor) -> tuple[Tensor, Tensor]:
        if not (yt.shape == ys.shape == yr.shape):
            raise ValueError(f"component shapes differ: {yt.shape}, {ys.shape}, {yr.shape}")
        g = self.gates([yt, ys, yr])
        y = g[..., 0] * yt + g[..., 1] * ys + g[..., 2] * yr
        return y, g


def gate_export(gates: Tensor, components: dict[str, Tensor]) -> str:
    """Gate values and component forecasts as JSON (B x H x C x 3 nested lists)."""
    doc = {"order": list(KINDS), "gates": gates.detach().double().tolist(),
           "components": {k: v.detach().double().tolist() for k, v in components.items()}}
    return json.dumps(doc)
