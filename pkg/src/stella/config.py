"""Run configuration: a flat INI document with one section per module.

Every key has a default; unknown sections or keys are rejected with the full
list of offenders. Example::

    [meta]
    schema_version = 1

    [data]
    dataset = ETTh1
    n_rows = 2000

    [backbone]
    n_layers = 2
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .model import ABLATIONS, ModelConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "ETTh1"
    data_dir: str = ""
    seq_len: int = 96
    pred_len: int = 96
    n_rows: int = 0  # 0: whole file
    split_mode: str = "auto"  # auto | ett_months | ratio
    ratios: str = "0.7,0.1,0.2"
    synthetic: bool = False
    synthetic_seed: int = 0

    def ratio_tuple(self) -> tuple[float, float, float]:
        parts = tuple(float(v) for v in self.ratios.split(","))
        if len(parts) != 3:
            raise ConfigError(f"data.ratios needs three values, got {self.ratios!r}")
        return parts


@dataclass(frozen=True)
class PatchSection:
    patch_len: int = 16
    stride: int = 16
    tcn_layers: int = 2
    tcn_sub_blocks: int = 3
    tcn_kernel: int = 3
    dropout: float = 0.1
    stl_hidden: int = 16


@dataclass(frozen=True)
class AnchorSection:
    fbp_len: int = 0  # 0: seq_len // patch_len
    csp_len: int = 10
    top_k: int = 3
    lora_r: int = 32
    lora_alpha: float = 64.0
    max_tokens: int = 128


@dataclass(frozen=True)
class HeadSection:
    lora_r: int = 8
    lora_alpha: float = 16.0
    base_trainable: bool = True


@dataclass(frozen=True)
class ModelSection:
    ablations: str = ""  # comma separated subset of no_nstl,no_tcp,no_fbp,no_csp
    revin_eps: float = 1e-5
    exact_inverse: bool = False


@dataclass(frozen=True)
class TrainSection:
    loss_kind: str = "MSE"
    lr: float = 1e-3
    warmup_epochs: int = 4
    decay_rate: float = 0.9
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 32
    grad_clip: float = 1.0
    mode: str = "standard"
    fraction: float = 1.0
    source: str = ""
    target: str = ""
    max_train_batches: int = 0
    max_eval_windows: int = 0
    threads: int = 0


SECTIONS = {
    "data": DataConfig,
    "tc_patch": PatchSection,
    "semantic_anchor": AnchorSection,
    "backbone": BackboneConfig,
    "decode_fusion": HeadSection,
    "model": ModelSection,
    "training": TrainSection,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    tc_patch: PatchSection = field(default_factory=PatchSection)
    semantic_anchor: AnchorSection = field(default_factory=AnchorSection)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decode_fusion: HeadSection = field(default_factory=HeadSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainSection = field(default_factory=TrainSection)
    seed: int = 0

    def ablations(self) -> frozenset:
        names = frozenset(a.strip() for a in self.model.ablations.split(",") if a.strip())
        bad = sorted(names - set(ABLATIONS))
        if bad:
            raise ConfigError(f"unknown ablations {bad}; choose from {', '.join(ABLATIONS)}")
        return names

    def model_config(self, n_channels: int) -> ModelConfig:
        p, a, h, m = self.tc_patch, self.semantic_anchor, self.decode_fusion, self.model
        return ModelConfig(
            n_channels=n_channels, seq_len=self.data.seq_len, pred_len=self.data.pred_len,
            patch_len=p.patch_len, stride=p.stride, stl_hidden=p.stl_hidden,
            tcn_layers=p.tcn_layers, tcn_sub_blocks=p.tcn_sub_blocks, tcn_kernel=p.tcn_kernel,
            dropout=p.dropout, fbp_len=a.fbp_len or None, csp_len=a.csp_len, top_k=a.top_k,
            sam_lora_r=a.lora_r, sam_lora_alpha=a.lora_alpha, max_tokens=a.max_tokens,
            head_lora_r=h.lora_r, head_lora_alpha=h.lora_alpha,
            head_base_trainable=h.base_trainable, revin_eps=m.revin_eps,
            exact_inverse=m.exact_inverse, backbone=self.backbone,
            ablations=self.ablations(), seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **dataclasses.asdict(self.training))

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(data={"pred_len": 192})``."""
        updates = {}
        for name, values in sections.items():
            if name == "seed":
                updates["seed"] = values
                continue
            current = getattr(self, name)
            _check_keys(name, type(current), values)
            updates[name] = replace(current, **values)
        out = replace(self, **updates)
        validate(out)
        return out

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "seed": self.seed,
                **{name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}}

    def to_ini(self) -> str:
        lines = ["[meta]", f"schema_version = {SCHEMA_VERSION}", f"seed = {self.seed}", ""]
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _check_keys(section: str, cls, values: dict) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from None
    return raw.strip()


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case so typos are reported verbatim
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown_sections = sorted(set(parser.sections()) - set(SECTIONS) - {"meta"})
    if unknown_sections:
        raise ConfigError(f"unknown sections: {', '.join(unknown_sections)}")
    seed = 0
    if parser.has_section("meta"):
        meta = dict(parser["meta"])
        _check_keys("meta", _Meta, meta)
        version = int(meta.get("schema_version", SCHEMA_VERSION))
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        seed = int(meta.get("seed", 0))
    cfg = RunConfig(seed=seed)
    errors = []
    for name, cls in SECTIONS.items():
        if not parser.has_section(name):
            continue
        values = dict(parser[name])
        try:
            _check_keys(name, cls, values)
        except ConfigError as exc:
            errors.append(str(exc))
            continue
        defaults = dataclasses.asdict(cls())
        typed = {k: _coerce(name, k, v, defaults[k]) for k, v in values.items()}
        try:
            cfg = replace(cfg, **{name: replace(getattr(cfg, name), **typed)})
        except ValueError as exc:
            errors.append(f"[{name}] {exc}")
    if errors:
        raise ConfigError("; ".join(errors))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Surface cross-field problems as configuration errors rather than at run time."""
    cfg.ablations()
    try:
        cfg.train_config()
        cfg.model_config(1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class _Meta:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
