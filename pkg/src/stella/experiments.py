"""End-to-end runs driven by a :class:`RunConfig`: train/evaluate, ablations and sweeps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .backbone import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config
from .metrics import MetricReport
from .model import Stella
from .training import (RunData, TrainResult, build_model, evaluate, few_shot, prepare_data,
                       train, zero_shot)

SWEEP_DEFAULTS = {"fbp": (3, 6, 12, 24, 48), "csp": (1, 5, 10, 20, 40)}


def load_data(cfg: RunConfig, dataset: str | None = None) -> RunData:
    d = cfg.data
    return prepare_data(dataset or d.dataset, d.seq_len, d.pred_len, d.n_rows, d.split_mode,
                        d.ratio_tuple(), d.data_dir or None, d.synthetic, d.synthetic_seed)


@dataclass
class ExperimentResult:
    model: Stella
    data: RunData
    train: TrainResult
    report: MetricReport


def run_experiment(cfg: RunConfig, out_dir: str | Path | None = None,
                   label: str = "") -> ExperimentResult:
    """Train under the configured protocol and report test metrics."""
    tc = cfg.train_config()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history = out / "history.csv" if out is not None else None
    meta = {"seed": cfg.seed, "mode": tc.mode, "variant": label or "custom",
            "ablations": sorted(cfg.ablations())}
    if tc.mode == "zero_shot":
        source = load_data(cfg, tc.source or cfg.data.dataset)
        target = load_data(cfg, tc.target)
        model = build_model(cfg.model_config(source.table.n_channels), source)
        result, report = zero_shot(model, source, target, tc, history)
        data = source
    else:
        data = load_data(cfg)
        if tc.mode == "few_shot":
            data = few_shot(data, tc.fraction)
            meta["fraction"] = tc.fraction
        model = build_model(cfg.model_config(data.table.n_channels), data)
        result = train(model, data, tc, history)
        report = evaluate(model, data, "test", limit=tc.max_eval_windows)
    report.meta.update(meta)
    report.meta.update({"best_epoch": result.best_epoch, "best_val": result.best_val,
                        "epochs_run": len(result.history)})
    if out is not None:
        save_checkpoint(model, out / "checkpoint.json", checkpoint_meta(cfg, model))
        (out / "metrics.json").write_text(report.to_json())
        (out / "config.ini").write_text(cfg.to_ini())
    return ExperimentResult(model, data, result, report)


def checkpoint_meta(cfg: RunConfig, model: Stella) -> dict:
    return {"config_ini": cfg.to_ini(), "n_channels": model.cfg.n_channels,
            "corpus_text": model.corpus_text}


def restore(path: str | Path) -> tuple[Stella, RunConfig]:
    """Rebuild a model from a checkpoint written by :func:`run_experiment`."""
    from .backbone import read_checkpoint

    _, meta = read_checkpoint(path)
    cfg = parse_config(meta["config_ini"])
    model = Stella(cfg.model_config(meta["n_channels"]), meta["corpus_text"])
    load_checkpoint(model, path)
    model.eval()
    return model, cfg


def ablate(cfg: RunConfig, out_dir: str | Path | None = None) -> list[MetricReport]:
    """The full model first, then one run per single-module ablation, all on one seed."""
    from .training import ablation_variants

    reports = []
    for name, flags in ablation_variants():
        variant = cfg.with_overrides(model={"ablations": ",".join(flags)})
        sub = Path(out_dir) / name if out_dir is not None else None
        reports.append(run_experiment(variant, sub, label=name).report)
    return reports


def sweep(cfg: RunConfig, axis: str, values: tuple[int, ...] | None = None,
          out_dir: str | Path | None = None) -> list[MetricReport]:
    """Vary the FBP or CSP prompt length, one training run per value."""
    if axis not in SWEEP_DEFAULTS:
        raise ValueError(f"sweep axis must be one of {sorted(SWEEP_DEFAULTS)}, got {axis!r}")
    values = tuple(values) if values else SWEEP_DEFAULTS[axis]
    key = "fbp_len" if axis == "fbp" else "csp_len"
    reports = []
    for v in values:
        variant = cfg.with_overrides(semantic_anchor={key: int(v)})
        sub = Path(out_dir) / f"{axis}_{v}" if out_dir is not None else None
        rep = run_experiment(variant, sub, label=f"{axis}={v}").report
        rep.meta.update({"axis": axis, "value": int(v)})
        reports.append(rep)
    return reports
