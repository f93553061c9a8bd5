"""Command-line entry point.

Exit codes: 0 success, 1 user or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .data import (DATASETS, DataError, dump_json, load_dataset, split_manifest,
                   synthetic_table, window_starts, write_csv)
from .decode_fusion import gate_export
from .experiments import SWEEP_DEFAULTS, ablate, load_data, restore, run_experiment, sweep
from .model import Stella
from .semantic_anchor import KINDS, render_csp_text

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("stella")


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="seed for every random source")
    p.add_argument("--dataset", help="registry name or CSV path")
    p.add_argument("--pred-len", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--ablate", help="comma separated: no_nstl,no_tcp,no_fbp,no_csp")
    p.add_argument("--out-dir", default="runs", help="artifact directory")
    p.add_argument("--synthetic", action="store_true", help="use the synthetic stand-in series")
    p.add_argument("--n-rows", type=int, help="use only the first N rows")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="stella", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", help="split and window-count manifest")
    _common(p)

    p = sub.add_parser("synth", help="write synthetic stand-in CSVs")
    _common(p)
    p.add_argument("names", nargs="*", help="registry names (default: all)")

    p = sub.add_parser("textualize", help="signatures and prompt texts for one window")
    _common(p)
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--checkpoint", help="use trained decomposition weights")

    for name, text in (("train", "train and write checkpoint, history, metrics"),
                       ("evaluate", "metrics of a checkpoint on the test split"),
                       ("forecast", "forecast CSV and gate JSON for test windows")):
        p = sub.add_parser(name, help=text)
        _common(p)
        if name != "train":
            p.add_argument("--checkpoint", required=True)
        if name == "forecast":
            p.add_argument("--window", type=int, default=0)
            p.add_argument("--n", type=int, default=1)

    p = sub.add_parser("ablate", help="full model plus the four single-module ablations")
    _common(p)

    p = sub.add_parser("sweep", help="prompt length sweep")
    _common(p)
    p.add_argument("--sweep-axis", choices=sorted(SWEEP_DEFAULTS), default="fbp")
    p.add_argument("--values", help="comma separated lengths")

    p = sub.add_parser("export-embeddings", help="component and prompt vectors for plotting")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=10)
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    data = {}
    if args.dataset:
        data["dataset"] = args.dataset
    if args.pred_len is not None:
        data["pred_len"] = args.pred_len
    if args.seq_len is not None:
        data["seq_len"] = args.seq_len
    if args.synthetic:
        data["synthetic"] = True
    if args.n_rows is not None:
        data["n_rows"] = args.n_rows
    over = {"data": data} if data else {}
    if args.ablate is not None:
        over["model"] = {"ablations": args.ablate}
    if args.seed is not None:
        over["seed"] = args.seed
    return cfg.with_overrides(**over) if over else cfg


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _table(cfg: RunConfig):
    d = cfg.data
    table = (synthetic_table(d.dataset, d.synthetic_seed) if d.synthetic
             else load_dataset(d.dataset, d.data_dir or None))
    return table.head(d.n_rows) if d.n_rows else table


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_inspect(args, cfg: RunConfig) -> dict:
    d = cfg.data
    table = _table(cfg)
    info = DATASETS.get(d.dataset) if not d.n_rows else None
    manifest = split_manifest(table, info, d.seq_len, d.pred_len, d.dataset)
    print(dump_json(manifest))
    return manifest


def cmd_synth(args, cfg: RunConfig) -> None:
    out = _out(args)
    for name in args.names or list(DATASETS):
        if name not in DATASETS:
            raise UserError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
        path = out / f"{name}.csv"
        write_csv(synthetic_table(name, cfg.data.synthetic_seed), path)
        print(path)


def cmd_textualize(args, cfg: RunConfig) -> list[dict]:
    if args.checkpoint:
        model, _ = restore(args.checkpoint)
        cfg = cfg.with_overrides(data={"seq_len": model.cfg.seq_len})
    data = load_data(cfg)
    if not args.checkpoint:
        model = Stella(cfg.model_config(data.table.n_channels), data.corpus_text)
    model.eval()
    starts = window_starts(data.bundle, args.split, cfg.data.seq_len, cfg.data.pred_len)
    if not 0 <= args.window < len(starts):
        raise UserError(f"window {args.window} out of range [0, {len(starts)}) for {args.split}")
    s = starts[args.window]
    x = torch.as_tensor(data.values[s:s + cfg.data.seq_len][None],
                        dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        xn, _ = model.revin.normalize(x)
        comp = dict(zip(KINDS, model.decompose(xn).as_tuple()))
    t = data.table
    records = [{"kind": "corpus", "text": render_csp_text(t.domain_tag, t.frequency, t.n_channels)}]
    for kind in KINDS:
        sigs, texts = model.sam.component_texts(comp[kind], kind)
        for c, (sig, text) in enumerate(zip(sigs, texts)):
            records.append({"kind": kind, "channel": t.channel_names[c], "window_start": int(s),
                            "signature": sig.to_dict(), "text": text})
    doc = json.dumps(records, indent=2)
    print(doc)
    (_out(args) / "textualize.json").write_text(doc)
    return records


def cmd_train(args, cfg: RunConfig) -> dict:
    res = run_experiment(cfg, _out(args), label="train")
    print(res.report.to_json())
    return res.report.to_dict()


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    from .training import evaluate

    model, saved = restore(args.checkpoint)
    data = load_data(_checkpoint_config(saved, cfg, args))
    report = evaluate(model, data, "test", limit=saved.training.max_eval_windows,
                      meta={"checkpoint": str(args.checkpoint)})
    (_out(args) / "metrics.json").write_text(report.to_json())
    print(report.to_json())
    return report.to_dict()


def _checkpoint_config(saved: RunConfig, cfg: RunConfig, args) -> RunConfig:
    """The checkpoint's config, with data source flags from the command line applied."""
    data = {}
    if args.dataset:
        data["dataset"] = args.dataset
    if args.synthetic:
        data["synthetic"] = True
    if args.n_rows is not None:
        data["n_rows"] = args.n_rows
    return saved.with_overrides(data=data) if data else saved


def cmd_forecast(args, cfg: RunConfig) -> None:
    model, saved = restore(args.checkpoint)
    run = _checkpoint_config(saved, cfg, args)
    data = load_data(run)
    S, H = model.cfg.seq_len, model.cfg.pred_len
    starts = window_starts(data.bundle, "test", S, H)
    if not 0 <= args.window < len(starts) or args.n < 1:
        raise UserError(f"window {args.window} out of range [0, {len(starts)})")
    chosen = starts[args.window:args.window + args.n]
    x = torch.as_tensor(np.stack([data.values[s:s + S] for s in chosen]),
                        dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        bundle = model(x)
    out = _out(args)
    names = data.table.channel_names
    with open(out / "forecast.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "window_start", "step", *names])
        for i, s in enumerate(chosen):
            for h in range(H):
                w.writerow([i, int(s), h, *(repr(float(v)) for v in bundle.forecast[i, h])])
    (out / "gates.json").write_text(gate_export(bundle.gates, bundle.components))
    print(out / "forecast.csv")


def cmd_ablate(args, cfg: RunConfig) -> list[dict]:
    reports = ablate(cfg, _out(args))
    doc = {"seed": cfg.seed, "variants": [r.to_dict() for r in reports]}
    (_out(args) / "ablation.json").write_text(json.dumps(doc, indent=2))
    _print_table([(r.meta["variant"], r.metrics) for r in reports])
    return doc["variants"]


def cmd_sweep(args, cfg: RunConfig) -> list[dict]:
    values = None
    if args.values:
        try:
            values = tuple(int(v) for v in args.values.split(","))
        except ValueError:
            raise UserError(f"--values must be comma separated integers, got {args.values!r}")
    reports = sweep(cfg, args.sweep_axis, values, _out(args))
    doc = {"seed": cfg.seed, "axis": args.sweep_axis, "runs": [r.to_dict() for r in reports]}
    (_out(args) / f"sweep_{args.sweep_axis}.json").write_text(json.dumps(doc, indent=2))
    _print_table([(r.meta["variant"], r.metrics) for r in reports])
    return doc["runs"]


def cmd_export_embeddings(args, cfg: RunConfig) -> Path:
    model, saved = restore(args.checkpoint)
    data = load_data(_checkpoint_config(saved, cfg, args))
    S = model.cfg.seq_len
    starts = window_starts(data.bundle, "test", S, model.cfg.pred_len)[: args.n]
    x = torch.as_tensor(np.stack([data.values[s:s + S] for s in starts]),
                        dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        fb = model(x, keep_hidden=True)
    b, c = len(starts), model.cfg.n_channels
    rows = []
    for kind in KINDS:  # (B*C) x P_n x D, pooled over channels and patches
        z = fb.hidden[kind].view(b, c, -1, fb.hidden[kind].shape[-1]).mean(dim=(1, 2))
        rows += [(kind, i, z[i]) for i in range(b)]
    if fb.anchors.get("csp") is not None:
        p = fb.anchors["csp"].mean(dim=1)
        rows += [("csp", i, p[i]) for i in range(b)]
    for kind, tag in zip(KINDS, ("fbp_T", "fbp_S", "fbp_R")):
        if f"fbp_{kind}" in fb.anchors:
            p = fb.anchors[f"fbp_{kind}"]
            p = p.view(b, c, -1, p.shape[-1]).mean(dim=(1, 2))
            rows += [(tag, i, p[i]) for i in range(b)]
    path = _out(args) / "embeddings.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "sample", *[f"d{j}" for j in range(model.cfg.d_model)]])
        for label, i, vec in rows:
            w.writerow([label, i, *(repr(float(v)) for v in vec)])
    print(path)
    return path


def _print_table(rows: list[tuple[str, dict]]) -> None:
    print(f"{'variant':<12} {'MSE':>10} {'MAE':>10}")
    for name, m in rows:
        print(f"{name:<12} {m['MSE']:>10.4f} {m['MAE']:>10.4f}")


COMMANDS = {
    "inspect": cmd_inspect, "synth": cmd_synth, "textualize": cmd_textualize,
    "train": cmd_train, "evaluate": cmd_evaluate, "forecast": cmd_forecast,
    "ablate": cmd_ablate, "sweep": cmd_sweep, "export-embeddings": cmd_export_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except (UserError, ConfigError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - surface anything else as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
