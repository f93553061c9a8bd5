"""Losses, schedule, the training loop and the experiment protocols."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (DATASETS, DataError, SeriesTable, SplitBundle, StandardScaler,
                   chronological_split, iterate_windows, load_dataset, standardize,
                   synthetic_table, window_starts)
from .metrics import MetricReport, forecast_report
from .model import ABLATIONS, ModelConfig, Stella
from .numerics import seed_everything
from .semantic_anchor import render_csp_text

log = logging.getLogger(__name__)

LOSS_KINDS = ("MSE", "MAE", "SMAPE")


@dataclass(frozen=True)
class TrainConfig:
    loss_kind: str = "MSE"
    lr: float = 1e-3
    warmup_epochs: int = 4
    decay_rate: float = 0.9
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 32
    grad_clip: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    mode: str = "standard"  # standard | few_shot | zero_shot
    fraction: float = 1.0
    source: str = ""
    target: str = ""
    max_train_batches: int = 0  # 0: all batches each epoch
    max_eval_windows: int = 0  # 0: every window
    threads: int = 0  # 0: leave torch's default

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.warmup_epochs >= self.max_epochs:
            raise ValueError("warmup_epochs must be smaller than max_epochs")
        if self.mode not in ("standard", "few_shot", "zero_shot"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")


def loss_fn(pred: torch.Tensor, target: torch.Tensor, kind: str = "MSE") -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"loss shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    err = pred - target
    if kind == "MSE":
        return err.pow(2).mean()
    if kind == "MAE":
        return err.abs().mean()
    if kind == "SMAPE":
        den = pred.abs() + target.abs()
        ratio = torch.where(den > 0, err.abs() / torch.where(den > 0, den, 1.0), 0.0)
        return 200.0 * ratio.mean()
    raise ValueError(f"unknown loss kind {kind!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from lr/100 to lr, then exponential decay."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    w = cfg.warmup_epochs
    if epoch < w:
        start = cfg.lr / 100.0
        return start + (cfg.lr - start) * epoch / w
    return cfg.lr * cfg.decay_rate ** (epoch - w)


class NonFiniteLoss(RuntimeError):
    pass


def _param_norms(model: torch.nn.Module) -> dict[str, float]:
    return {n: float(p.detach().norm()) for n, p in model.named_parameters() if p.requires_grad}


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


@dataclass
class RunData:
    table: SeriesTable
    bundle: SplitBundle
    values: np.ndarray  # standardized with train-segment statistics
    scaler: StandardScaler
    corpus_text: str
    name: str = ""
    oversample: int = 1


def prepare_data(name: str, seq_len: int, pred_len: int, n_rows: int = 0,
                 split_mode: str = "auto", ratios=(0.7, 0.1, 0.2), data_dir: str | None = None,
                 synthetic: bool = False, synthetic_seed: int = 0,
                 table: SeriesTable | None = None) -> RunData:
    info = DATASETS.get(name)
    if table is None:
        if synthetic:
            if info is None:
                raise DataError(f"no synthetic stand-in for unknown dataset {name!r}")
            table = synthetic_table(name, synthetic_seed)
        else:
            table = load_dataset(name, data_dir)
    if n_rows:
        table = table.head(n_rows)
    if split_mode == "auto":
        split_mode = info.split_mode if (info is not None and not n_rows) else "ratio"
    bundle = chronological_split(table, split_mode, tuple(ratios), seq_len, pred_len)
    values, scaler = standardize(table, bundle)
    text = render_csp_text(table.domain_tag, table.frequency, table.n_channels)
    factor = info.oversample if info is not None else 1
    return RunData(table, bundle, values, scaler, text, name, factor)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    best_state: dict | None = None
    stopped_early: bool = False
    seconds: float = 0.0


def _eval_starts(bundle: SplitBundle, split: str, seq_len: int, pred_len: int,
                 limit: int) -> np.ndarray:
    starts = window_starts(bundle, split, seq_len, pred_len)
    if limit and len(starts) > limit:
        starts = starts[np.linspace(0, len(starts) - 1, limit).round().astype(int)]
    return starts


@torch.no_grad()
def predict_split(model: Stella, data: RunData, split: str, batch_size: int = 64,
                  limit: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forecasts, targets and inputs (B x H x C, B x H x C, B x S x C) for a split."""
    cfg = model.cfg
    was_training = model.training
    model.eval()
    starts = _eval_starts(data.bundle, split, cfg.seq_len, cfg.pred_len, limit)
    dtype = next(model.parameters()).dtype
    preds, ys, xs = [], [], []
    for batch in iterate_windows(data.values, data.bundle, split, cfg.seq_len, cfg.pred_len,
                                 batch_size, starts=starts):
        x = torch.as_tensor(batch.x, dtype=dtype)
        preds.append(model(x).forecast.double().numpy())
        ys.append(batch.y)
        xs.append(batch.x)
    model.train(was_training)
    return np.concatenate(preds), np.concatenate(ys), np.concatenate(xs)


def evaluate(model: Stella, data: RunData, split: str = "test", batch_size: int = 64,
             limit: int = 0, meta: dict | None = None) -> MetricReport:
    pred, y, _ = predict_split(model, data, split, batch_size, limit)
    return forecast_report(y, pred, {"split": split, "n_windows": int(len(y)), **(meta or {})})


def naive_repeat_last(x: np.ndarray, pred_len: int) -> np.ndarray:
    return np.repeat(x[:, -1:, :], pred_len, axis=1)


def train(model: Stella, data: RunData, cfg: TrainConfig,
          history_path: str | Path | None = None) -> TrainResult:
    """Adam on the trainable subset with warmup/decay, clipping and early stopping.

    The loss compares denormalized forecasts with raw (train-standardized)
    targets. The best validation state is kept and restored at the end.
    """
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    rng = seed_everything(cfg.seed)
    mcfg = model.cfg
    dtype = next(model.parameters()).dtype
    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=lr_at(0, cfg), betas=cfg.adam_betas, eps=cfg.adam_eps)
    result = TrainResult()
    t0 = time.perf_counter()
    bad_epochs = 0
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        losses = []
        batches = iterate_windows(data.values, data.bundle, "train", mcfg.seq_len, mcfg.pred_len,
                                  cfg.batch_size, rng=rng, oversample_factor=data.oversample)
        for i, batch in enumerate(batches):
            if cfg.max_train_batches and i >= cfg.max_train_batches:
                break
            x = torch.as_tensor(batch.x, dtype=dtype)
            y = torch.as_tensor(batch.y, dtype=dtype)
            loss = loss_fn(model(x).forecast, y, cfg.loss_kind)
            if not torch.isfinite(loss):
                norms = _param_norms(model)
                worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
                raise NonFiniteLoss(f"non-finite loss {loss.item()} at epoch {epoch}, batch {i}; "
                                    f"largest parameter norms: {worst}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
        pred, y, _ = predict_split(model, data, "val", limit=cfg.max_eval_windows)
        val = float(loss_fn(torch.from_numpy(pred), torch.from_numpy(y), cfg.loss_kind))
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_loss": val}
        result.history.append(row)
        log.info("epoch %d lr %.3g train %.5f val %.5f", epoch, lr, row["train_loss"], val)
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            result.best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience and epoch + 1 >= cfg.warmup_epochs:
                result.stopped_early = True
                break
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    result.seconds = time.perf_counter() - t0
    if history_path is not None:
        write_history(result.history, history_path)
    return result


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "val_loss"])
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


def build_model(mcfg: ModelConfig, data: RunData) -> Stella:
    if mcfg.n_channels != data.table.n_channels:
        raise ValueError(f"model expects {mcfg.n_channels} channels, data has "
                         f"{data.table.n_channels}")
    return Stella(mcfg, data.corpus_text)


def few_shot(data: RunData, fraction: float) -> RunData:
    """Keep only the leading ``fraction`` of the training segment before windowing."""
    if fraction == 1.0:
        return data
    return RunData(data.table, data.bundle.truncate_train(fraction), data.values, data.scaler,
                   data.corpus_text, data.name, data.oversample)


def zero_shot(model: Stella, source: RunData, target: RunData, cfg: TrainConfig,
              history_path: str | Path | None = None) -> tuple[TrainResult, MetricReport]:
    """Train on ``source``, evaluate on ``target``'s test split with no target training."""
    if source.table.n_channels != target.table.n_channels:
        raise ValueError(f"zero-shot needs equal channel counts, got {source.table.n_channels} "
                         f"and {target.table.n_channels}")
    result = train(model, source, cfg, history_path)
    source_text = model.corpus_text
    model.corpus_text = target.corpus_text
    try:
        report = evaluate(model, target, "test", limit=cfg.max_eval_windows,
                          meta={"source": source.name, "target": target.name})
    finally:
        model.corpus_text = source_text
    return result, report


def ablation_variants() -> list[tuple[str, tuple[str, ...]]]:
    return [("full", ())] + [(a, (a,)) for a in ABLATIONS]
