"""Train the toy configuration on the first 2000 rows of ETTh1 and compare with naive.

Roughly three minutes on one CPU core. Run: python demos/02_train_and_compare.py
"""
import logging
from pathlib import Path

import numpy as np

from stella.config import load_config
from stella.data import load_dataset
from stella.experiments import run_experiment
from stella.training import naive_repeat_last, predict_split

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "etth1_2000.ini")
try:
    load_dataset(cfg.data.dataset)
except FileNotFoundError:
    cfg = cfg.with_overrides(data={"synthetic": True})
    print("(real ETTh1 not found, using the synthetic stand-in)")

res = run_experiment(cfg, "runs/demo_train")
pred, y, x = predict_split(res.model, res.data, "test")
naive = naive_repeat_last(x, cfg.data.pred_len)
m, n = float(np.mean((pred - y) ** 2)), float(np.mean((naive - y) ** 2))
print(f"\ntest MSE {m:.4f}   repeat-last MSE {n:.4f}   ratio {m / n:.3f}")
print(f"best epoch {res.train.best_epoch} of {len(res.train.history)}, "
      f"{res.train.seconds:.0f}s of training")

# how the fusion gates weight the three component forecasts, averaged over the test set
import torch  # noqa: E402

with torch.no_grad():
    xb = torch.as_tensor(x[:64], dtype=torch.float32)
    g = res.model(xb).gates.mean(dim=(0, 1, 2))
print("mean gate (trend, seasonal, residual):", [round(float(v), 3) for v in g])
print("artifacts in runs/demo_train: checkpoint.json metrics.json config.ini history.csv")
