"""
Overfitting the desk model
==========================

A small model trained on the eight synthetic pairs. The default of 1000
iterations takes about ten minutes on one CPU core. Pass a smaller count as
the second argument for a quick look.
"""

import sys
import time
from pathlib import Path

import torch

from vimdisp.data_io import desk_suite
from vimdisp.model import ViMDisparity, desk_config, save_checkpoint
from vimdisp.render import render_heatmap
from vimdisp.train import evaluate_samples, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_output") / "training"
iters = int(sys.argv[2]) if len(sys.argv) > 2 else 1000
out.mkdir(parents=True, exist_ok=True)

torch.manual_seed(0)
suite = desk_suite()
model = ViMDisparity(desk_config())
print(f"{sum(p.numel() for p in model.parameters()):,} parameters")

# %%
start = time.perf_counter()
rows = train(model, suite, iters, lr=2e-3, schedule="cosine", warmup=min(50, iters // 4), log_path=str(out / "loss_log.csv"))
print(f"{iters} iterations in {time.perf_counter() - start:.0f} s, final loss {rows[-1][1]:.4f}")

# %%
epe, d1, preds = evaluate_samples(model, suite)
print(f"EPE {epe:.3f} px, D1 {d1:.2%}")
for s, p in zip(suite[:4], preds):
    print(f"true shift {s.meta['layers'][0]:>4} px -> mean prediction {p[s.gt.valid].mean():6.2f} px")
render_heatmap(preds[4], out / "two_plane_pred.png")
save_checkpoint(model, out / "checkpoint.npz")
print("checkpoint written to", out / "checkpoint.npz")
