"""The whole pipeline with fewer images than the default (one to two minutes).

Trains three small generators, builds the dataset, estimates uncertainty
maps, trains the detector on generator A and scores every generator.

    python demos/tiny_pipeline.py
"""

from diffuq import harness

cfg = harness.PipelineConfig(n_real=300, n_fake=300, n_fake_unseen=150)
res = harness.run_pipeline(cfg)

for s in res.manifest.stages:
    print(f"{s['stage']:<16} {s['seconds']:7.1f}s")

print("\nper-image separability on reals vs generator A")
for name, row in res.manifest.metrics["separability"].items():
    print(f"  {name:<10} gap {row['gap']:+.2f}  AUROC {row['auroc']:.3f}")

rep = res.report
print(f"\ntest ACC@0.5 {rep.acc_at_half:.3f}  AP {rep.average_precision:.3f}  "
      f"AUROC {rep.auroc:.3f}")
for tag, m in rep.per_generator.items():
    print(f"  generator {tag}: ACC {m['acc_at_half']:.3f}  AUROC {m['auroc']:.3f}")
