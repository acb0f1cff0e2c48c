"""Generate a small database, train lightrdl, score it, and compare timings
against the cumulative-graph baseline.

    python demos/quickstart.py [workdir]
"""
import json
import sys
import tempfile
from pathlib import Path

from relsnap import synth
from relsnap.pipeline import BASELINE, LIGHTRDL, PipelineConfig, run_bench, run_eval, run_synth, run_train

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="relsnap-"))
data = run_synth(synth.SynthConfig(n_users=200, n_timestamps=100), work / "db", overwrite=True)
print("database in", data)

cfg = {
    "schema": "db/schema.json",
    "data": "db/data",
    "task": "db/tasks/user-churn.json",
    "output": "bundle",
    "window": 4,
    "seeds": [0, 1],
    "gnn": {"hidden": 64, "depth": 2, "epochs": 15},
}
(work / "config.json").write_text(json.dumps(cfg, indent=2))
config = PipelineConfig.load(work / "config.json")

bundle = run_train(config)
res = run_eval(bundle)
for r in res.reports:
    print(f"  {r.name} on {r.n} test rows: {r.value:.4f}")
print(f"mean {res.mean:.4f}  std {res.std:.4f}")

# one seed is enough for timing
report = run_bench(PipelineConfig.load(work / "config.json"), (LIGHTRDL, BASELINE))
print()
print(report.table())
