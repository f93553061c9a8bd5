"""The full forecaster: normalize, decompose, encode, prompt, run the backbone, decode, fuse."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig, trainable_parameters
from .decode_fusion import ComponentHead, GatedFusion
from .normalization import RevIN, RevinStats, to_lattice
from .semantic_anchor import KINDS, SemanticAnchorModule, SequenceLayout, assemble_input, \
    broadcast_channels, render_csp_text
from .stl import ComponentTriple, NeuralSTL, passthrough_decomposition
from .tc_patch import ComponentEncoders, PatchConfig

Tensor = torch.Tensor

ABLATIONS = ("no_nstl", "no_tcp", "no_fbp", "no_csp")


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 7
    seq_len: int = 96
    pred_len: int = 96
    patch_len: int = 16
    stride: int = 16
    stl_hidden: int = 16
    tcn_layers: int = 2
    tcn_sub_blocks: int = 3
    tcn_kernel: int = 3
    dropout: float = 0.1
    fbp_len: int | None = None  # default seq_len // patch_len
    csp_len: int = 10
    top_k: int = 3
    sam_lora_r: int = 32
    sam_lora_alpha: float = 64.0
    max_tokens: int = 128
    head_lora_r: int = 8
    head_lora_alpha: float = 16.0
    head_base_trainable: bool = True
    revin_eps: float = 1e-5
    exact_inverse: bool = False
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    ablations: frozenset = frozenset()
    seed: int = 0

    def __post_init__(self):
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablations {sorted(bad)}; choose from {ABLATIONS}")

    @property
    def d_model(self) -> int:
        return self.backbone.d_model

    @property
    def fbp_tokens(self) -> int:
        return self.fbp_len if self.fbp_len is not None else self.seq_len // self.patch_len

    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.seq_len, self.patch_len, self.stride, self.tcn_layers,
                           self.tcn_sub_blocks, self.tcn_kernel, self.dropout, self.d_model)

    def with_ablations(self, *names: str) -> "ModelConfig":
        return replace(self, ablations=frozenset(names))


@dataclass
class ForecastBundle:
    forecast: Tensor  # B x H x C, input scale
    normalized: Tensor  # fused forecast before denormalization
    components: dict[str, Tensor]  # normalized component forecasts
    gates: Tensor  # B x H x C x 3
    decomposition: ComponentTriple
    stats: RevinStats
    hidden: dict[str, Tensor] = field(default_factory=dict)
    anchors: dict[str, Tensor] = field(default_factory=dict)
    layout: SequenceLayout | None = None


class Stella(nn.Module):
    def __init__(self, cfg: ModelConfig, corpus_text: str | None = None):
        super().__init__()
        self.cfg = cfg
        self.corpus_text = corpus_text or render_csp_text(None, None, cfg.n_channels)
        g = torch.Generator().manual_seed(cfg.seed)
        torch.manual_seed(cfg.seed)
        pc = cfg.patch_config()
        self.n_patches = pc.n_patches
        self.revin = RevIN(cfg.n_channels, cfg.revin_eps, cfg.exact_inverse)
        self.stl = None if "no_nstl" in cfg.ablations else NeuralSTL(cfg.n_channels, cfg.stl_hidden)
        self.encoders = ComponentEncoders(pc, linear="no_tcp" in cfg.ablations)
        self.sam = SemanticAnchorModule(
            cfg.d_model, cfg.fbp_tokens, cfg.csp_len, cfg.top_k, cfg.sam_lora_r,
            cfg.sam_lora_alpha, cfg.dropout, cfg.max_tokens, text_seed=cfg.seed,
            use_fbp="no_fbp" not in cfg.ablations, use_csp="no_csp" not in cfg.ablations,
            generator=g)
        self.backbone = Backbone(cfg.backbone)
        self.heads = nn.ModuleDict({
            k: ComponentHead(self.n_patches, cfg.d_model, cfg.pred_len, None, cfg.head_lora_r,
                             cfg.head_lora_alpha, cfg.dropout, cfg.head_base_trainable, g)
            for k in KINDS})
        self.fusion = GatedFusion(cfg.pred_len, generator=g)

    def decompose(self, xn: Tensor) -> ComponentTriple:
        if self.stl is None:
            return passthrough_decomposition(to_lattice(xn))
        return self.stl(xn)

    def forward(self, x: Tensor, keep_hidden: bool = False) -> ForecastBundle:
        cfg = self.cfg
        if x.dim() != 3 or x.shape[1:] != (cfg.seq_len, cfg.n_channels):
            raise ValueError(f"expected B x {cfg.seq_len} x {cfg.n_channels}, got {tuple(x.shape)}")
        b, c = x.shape[0], cfg.n_channels
        xn, stats = self.revin.normalize(x)
        parts = self.decompose(xn)
        comp = dict(zip(KINDS, parts.as_tuple()))
        tokens = {k: self.encoders(comp[k], k) for k in KINDS}
        anchors = self.sam(comp, self.corpus_text)
        csp = broadcast_channels(anchors.csp, c) if anchors.csp is not None else None
        seq, layout = assemble_input(csp, anchors.fbp, tokens)
        hidden = self.backbone(seq, layout)
        outs = {k: self.heads[k](hidden[k], c) for k in KINDS}
        fused, gates = self.fusion(outs["trend"], outs["seasonal"], outs["residual"])
        y = self.revin.denormalize(fused, stats)
        extra = {}
        if keep_hidden:
            extra = {"csp": anchors.csp, **{f"fbp_{k}": v for k, v in (anchors.fbp or {}).items()}}
        return ForecastBundle(y, fused, outs, gates, parts, stats,
                              hidden if keep_hidden else {}, extra, layout)

    def predict(self, x: Tensor) -> Tensor:
        return self.forward(x).forecast

    def trainable_parameters(self) -> list[nn.Parameter]:
        """Everything outside the backbone plus the backbone's adapters and norm gains."""
        backbone_ids = {id(p) for p in self.backbone.parameters()}
        own = [p for p in self.parameters() if id(p) not in backbone_ids and p.requires_grad]
        return own + trainable_parameters(self.backbone)

    def freeze_for_finetuning(self) -> None:
        keep = {id(p) for p in self.trainable_parameters()}
        for p in self.parameters():
            p.requires_grad_(id(p) in keep)
