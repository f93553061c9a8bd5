"""Learnable trend/seasonal/residual decomposition.

A channel-independent stage (one LSTM per channel plus a shared contraction)
produces a proto-trend ``Z``; time-shared channel mixers then build the trend
from ``Z`` and the seasonal part from the detrended input. The residual is
whatever is left. Input, trend and seasonal parts are kept on the dyadic
lattice of :func:`stella.normalization.to_lattice`, so ``T + S + R``
reproduces the (lattice) input bit for bit rather than up to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .normalization import to_lattice

Tensor = torch.Tensor


@dataclass
class ComponentTriple:
    trend: Tensor
    seasonal: Tensor
    residual: Tensor

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.trend, self.seasonal, self.residual

    def total(self) -> Tensor:
        return self.trend + self.seasonal + self.residual


class ChannelMixer(nn.Module):
    """Two-layer MLP over the channel axis, applied independently at every time step."""

    def __init__(self, n_channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(n_channels, 8)
        self.fc1 = nn.Linear(n_channels, hidden)
        self.fc2 = nn.Linear(hidden, n_channels)

    def forward(self, x: Tensor) -> Tensor:  # B x S x C
        return self.fc2(F.gelu(self.fc1(x)))


class NeuralSTL(nn.Module):
    def __init__(self, n_channels: int, hidden_size: int = 16, mixer_hidden: int | None = None):
        super().__init__()
        self.n_channels = n_channels
        self.hidden_size = hidden_size
        self.lstms = nn.ModuleList(nn.LSTM(1, hidden_size, batch_first=True)
                                   for _ in range(n_channels))
        for lstm in self.lstms:
            with torch.no_grad():
                # gate order i, f, g, o; bias_ih + bias_hh gives forget bias 1
                lstm.bias_ih_l0[hidden_size:2 * hidden_size].fill_(1.0)
                lstm.bias_hh_l0[hidden_size:2 * hidden_size].fill_(0.0)
        self.contract = nn.Linear(hidden_size, 1)  # w_l, b_l shared by all channels
        self.trend_mixer = ChannelMixer(n_channels, mixer_hidden)
        self.season_mixer = ChannelMixer(n_channels, mixer_hidden)

    def proto_trend(self, xn: Tensor) -> Tensor:
        if xn.shape[-1] != self.n_channels:
            raise ValueError(f"expected {self.n_channels} channels, got {xn.shape[-1]}")
        cols = []
        for c, lstm in enumerate(self.lstms):
            h, _ = lstm(xn[:, :, c:c + 1])  # B x S x d_h
            cols.append(F.gelu(self.contract(h)))
        return torch.cat(cols, dim=-1)

    def synthesize(self, xn: Tensor, z: Tensor) -> ComponentTriple:
        xn = to_lattice(xn)
        trend = to_lattice(self.trend_mixer(z))
        detrended = xn - trend
        seasonal = to_lattice(self.season_mixer(detrended))
        residual = detrended - seasonal
        return ComponentTriple(trend, seasonal, residual)

    def forward(self, xn: Tensor) -> ComponentTriple:
        xn = to_lattice(xn)
        return self.synthesize(xn, self.proto_trend(xn))


def passthrough_decomposition(xn: Tensor) -> ComponentTriple:
    """Decomposition used when the learnable stage is ablated: everything is trend."""
    zeros = torch.zeros_like(xn)
    return ComponentTriple(xn, zeros, zeros.clone())
