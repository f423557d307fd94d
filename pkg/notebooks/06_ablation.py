"""
Pass-policy and attention ablation
==================================

Three variants: both token orders in one batched traversal of the encoder
stack (the default), two sequential traversals, and the default plus a
self-attention layer. Rounds are interleaved so machine drift hits all
variants alike. The rounds count is the second argument.
"""

import sys
from pathlib import Path

from vimdisp import bench
from vimdisp.model import desk_config

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_output") / "ablation"
rounds = int(sys.argv[2]) if len(sys.argv) > 2 else 3
out.mkdir(parents=True, exist_ok=True)
models = bench.ablation_models(desk_config(), seed=0)
# On a single core, batching the two orders saves calls but gains no
# parallelism, so the gap shows best on small inputs where overhead dominates.
sources = bench.dataset_sources(["synthetic"], synthetic_size=(64, 32))
results = bench.run_ablation(models, sources, rounds=rounds)
table = bench.ablation_markdown(results)
(out / "ablation.md").write_text(table)
print(table)

fps = {label: recs[0].fps_avg for label, recs in results.items()}
base = fps["Proposed model"]
for label, v in fps.items():
    print(f"{label:>24}: {v:6.2f} FPS ({v / base - 1:+.1%})")
