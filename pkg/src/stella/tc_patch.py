"""Temporal convolutional patch encoder.

Each component series is cut into ``P_n`` patches of length ``P_ell``. The
TCN treats ``B*C`` as batch, ``P_n`` as conv channels and ``P_ell`` as the
sequence axis, so its causal convolutions run along the positions inside a
patch. A projection head then lifts every patch from ``P_ell`` to ``D``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .normalization import RMSNorm
from .numerics import WeightNormConv

Tensor = torch.Tensor

COMPONENTS = ("trend", "seasonal", "residual")


@dataclass(frozen=True)
class PatchConfig:
    seq_len: int = 96
    patch_len: int = 16
    stride: int = 16
    tcn_layers: int = 2
    sub_blocks: int = 3
    kernel_size: int = 3
    dropout: float = 0.1
    d_model: int = 64

    @property
    def n_patches(self) -> int:
        return num_patches(self.seq_len, self.patch_len, self.stride)

    def dilations(self) -> list[int]:
        return [2 ** m for m in range(self.sub_blocks)]

    def receptive_field_per_layer(self) -> int:
        return 1 + (self.kernel_size - 1) * (2 ** self.sub_blocks - 1)


def num_patches(seq_len: int, patch_len: int, stride: int) -> int:
    if seq_len < patch_len:
        raise ValueError(f"sequence length {seq_len} shorter than patch length {patch_len}")
    return (seq_len - patch_len) // stride + 1


def patch_view(z: Tensor, patch_len: int, stride: int) -> Tensor:
    """B x S x C -> (B*C) x P_n x P_ell, trailing steps beyond the last patch dropped."""
    b, s, c = z.shape
    num_patches(s, patch_len, stride)
    p = z.permute(0, 2, 1).unfold(-1, patch_len, stride)  # B x C x P_n x P_ell
    return p.reshape(b * c, p.shape[2], patch_len)


class Patchify(nn.Module):
    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        self.norm = RMSNorm(cfg.patch_len)

    def forward(self, z: Tensor) -> Tensor:
        return self.norm(patch_view(z, self.cfg.patch_len, self.cfg.stride))


class TCNSubBlock(nn.Module):
    """Causal dilated conv -> RMSNorm over patches -> GELU -> dropout, with a skip."""

    def __init__(self, n_patches: int, kernel_size: int, dilation: int, dropout: float):
        super().__init__()
        self.conv = WeightNormConv(n_patches, n_patches, kernel_size, "causal", dilation)
        # normalize across the patch (channel) axis at each position so that
        # position t never sees positions > t
        self.norm = RMSNorm(n_patches, dim=1)
        self.dropout = dropout

    def forward(self, x: Tensor) -> Tensor:
        u = F.gelu(self.norm(self.conv(x)))
        return x + F.dropout(u, self.dropout, self.training)


class TCN(nn.Module):
    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            TCNSubBlock(cfg.n_patches, cfg.kernel_size, d, cfg.dropout)
            for _ in range(cfg.tcn_layers) for d in cfg.dilations()
        )

    def forward(self, tokens: Tensor) -> Tensor:
        h = tokens
        for block in self.blocks:
            h = block(h)
        return h


class ProjectionHead(nn.Module):
    """``E = DW(GELU(H) W^T + TConv(H))`` per patch, lifting P_ell to D."""

    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.linear = nn.Linear(cfg.patch_len, cfg.d_model, bias=False)
        bound = 1.0 / cfg.patch_len ** 0.5
        nn.init.uniform_(self.linear.weight, -bound, bound)
        # kernel 1, stride 1: the transposed conv acts as a learned up-projection
        self.tconv = WeightNormConv(cfg.patch_len, cfg.d_model, 1, "transpose")
        self.depthwise = WeightNormConv(cfg.n_patches, cfg.n_patches, 1, "depthwise")

    def upsample_residual(self, h: Tensor) -> Tensor:
        # (N, P_ell) rows become (N, P_ell, 1) sequences of length one
        return self.tconv(h.unsqueeze(-1)).squeeze(-1)

    def forward(self, h: Tensor) -> Tensor:
        bc, pn, pl = h.shape
        flat = h.reshape(bc * pn, pl)
        lifted = self.linear(F.gelu(flat)) + self.upsample_residual(flat)
        return self.depthwise(lifted.reshape(bc, pn, -1))


class TCPatchEncoder(nn.Module):
    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        self.patchify = Patchify(cfg)
        self.tcn = TCN(cfg)
        self.head = ProjectionHead(cfg)

    def forward(self, z: Tensor) -> Tensor:
        return self.head(self.tcn(self.patchify(z)))


class LinearPatchEncoder(nn.Module):
    """Ablation stand-in: patchify then a single linear map P_ell -> D per patch."""

    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        self.patchify = Patchify(cfg)
        self.proj = nn.Linear(cfg.patch_len, cfg.d_model)

    def forward(self, z: Tensor) -> Tensor:
        return self.proj(self.patchify(z))


class ComponentEncoders(nn.Module):
    """Three encoders with disjoint parameters, one per component."""

    def __init__(self, cfg: PatchConfig, linear: bool = False):
        super().__init__()
        cls = LinearPatchEncoder if linear else TCPatchEncoder
        self.encoders = nn.ModuleDict({k: cls(cfg) for k in COMPONENTS})

    def forward(self, component: Tensor, kind: str) -> Tensor:
        if kind not in self.encoders:
            raise ValueError(f"unknown component {kind!r}")
        return self.encoders[kind](component)
