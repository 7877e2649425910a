"""The whole experiment (direct, transfer and filtered settings) from a config file.

Run: python3 demos/06_experiment.py [config.json]

The default is configs/smoke.json: a few seconds with barely trained models,
so its numbers only show the shape of the report.
configs/toy.json is the full toy experiment (a few minutes).
"""

import sys
from pathlib import Path

from landet.evaluation import ExperimentConfig, metrics_table, run_experiment

path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "configs/smoke.json"
result = run_experiment(ExperimentConfig.from_json(path))
report = result.report

print("accuracies:")
for k, v in sorted(report["accuracies"].items()):
    print(f"  {k:<20}{v:.3f}")
print(f"filter kept fraction {report['filter']['kept_fraction']:.3f}")
print("retention (direct):", {k: round(v, 3) for k, v in report["retention"].items()})
print()
print(metrics_table(report))
print()
print(f"total {sum(result.timings.values()):.1f}s over {len(result.timings)} stages")
