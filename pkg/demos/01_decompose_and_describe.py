"""Walk one ETTh1 window through normalization, decomposition and textualization.

Uses the synthetic stand-in unless data/ETTh1.csv (or $STELLA_DATA_DIR) holds the real file.
Run: python demos/01_decompose_and_describe.py
"""
import torch

from stella import ModelConfig, Stella
from stella.data import load_dataset, synthetic_table
from stella.normalization import to_lattice
from stella.semantic_anchor import KINDS, render_csp_text

try:
    table = load_dataset("ETTh1")
except FileNotFoundError:
    table = synthetic_table("ETTh1")
    print("(real ETTh1 not found, using the synthetic stand-in)")

S = 96
x = torch.tensor(table.values[:S][None], dtype=torch.float64)
model = Stella(ModelConfig(n_channels=table.n_channels, seq_len=S)).double().eval()

# instance normalization, then the learned trend/seasonal/residual split
xn, stats = model.revin.normalize(x)
with torch.no_grad():
    parts = model.decompose(xn)
closure = torch.equal(parts.trend + parts.seasonal + parts.residual, to_lattice(xn))
print(f"window of {S} steps x {table.n_channels} channels; T + S + R reproduces the "
      f"normalized input bit for bit: {closure}")

# the corpus prompt is shared by every window of the dataset
print("\ncorpus prompt:\n ", render_csp_text(table.domain_tag, table.frequency, table.n_channels))

# component prompts are per window and per channel; show the target channel OT
ot = table.channel_names.index("OT")
comps = dict(zip(KINDS, parts.as_tuple()))
for kind in KINDS:
    sigs, texts = model.sam.component_texts(comps[kind], kind)
    print(f"\n{kind} / OT:\n  {texts[ot]}")

# the backbone input: corpus prompt, then per component its prompt and its patch tokens
with torch.no_grad():
    out = model(x)
print("\nassembled sequence:")
for seg in out.layout.segments:
    print(f"  {seg.name:<16} offset {seg.offset:>3}  length {seg.length}")
print(f"  total {out.layout.total}")
