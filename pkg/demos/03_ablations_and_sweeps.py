"""Ablate each module and sweep the prompt lengths on a small configuration.

Numbers at this scale say nothing about which module matters at full scale;
the point is that every variant trains and reports through the same harness.
Run: python demos/03_ablations_and_sweeps.py
"""
from pathlib import Path

from stella.config import load_config
from stella.experiments import ablate, sweep

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "toy.ini")

print(f"{'variant':<10} {'MSE':>8} {'MAE':>8}")
for rep in ablate(cfg, "runs/demo_ablate"):
    print(f"{rep.meta['variant']:<10} {rep.metrics['MSE']:>8.4f} {rep.metrics['MAE']:>8.4f}")

for axis in ("fbp", "csp"):
    print(f"\n{axis} prompt length sweep")
    for rep in sweep(cfg, axis, None, f"runs/demo_sweep_{axis}"):
        print(f"  {rep.meta['value']:>3} tokens  MSE {rep.metrics['MSE']:.4f}")
