"""
Benchmark records and the SOMER score
=====================================

SOMER folds speed, error and memory into one number: fps / (epe * ln(mem)).
Here it is recomputed for a set of published reference rows, then a live
measurement of the desk model is added to the report.
"""

import math
import sys
from pathlib import Path

from vimdisp import bench, metrics
from vimdisp.model import desk_config

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_output") / "report"
out.mkdir(parents=True, exist_ok=True)
reference = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "reference_bench.csv"

# %%
# Natural log reproduces the printed scores; base 10 does not.
rows = metrics.read_csv(reference)
for r in rows:
    ln = metrics.somer(r.fps_avg, r.epe, r.mem_mib)
    log10 = r.fps_avg / (r.epe * math.log10(r.mem_mib))
    flag = "" if abs(ln / r.somer - 1) <= 0.03 else "   <- printed value off by ~10x"
    print(f"{r.dataset:>13} {r.model:>9}: printed {r.somer:7.4g}  ln {ln:7.4g}  log10 {log10:7.4g}{flag}")

# %%
# Measure the (untrained) desk model on the synthetic suite. Only the model
# call is timed; memory is the peak rise of anonymous resident memory.
adapter = bench.ViMAdapter(bench.default_model(desk_config()), name="desk")
live = bench.run_bench(adapter, bench.dataset_sources(["synthetic"]), rounds=2)
print(metrics.records_to_csv(live))
(out / "report.md").write_text(metrics.records_to_markdown(metrics.aggregate(live)))
print("report written to", out / "report.md")
