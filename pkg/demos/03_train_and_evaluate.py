"""
Training a split ensemble on synthetic blobs
============================================

A shortened run of the desk benchmark: train with splitting and pruning,
then compare against a single network on a held-out blob cluster.  Pass a
seed as the first argument.  The full benchmark uses 30 epochs; after only
12 the pruned branches are undertrained and the split model's OOD score is
far weaker than at the end of a full run.
"""

import sys

from split_ensemble import harness

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
epochs = 12

data = harness.load_data(harness.benchmark_config())
print(f"train {tuple(data.train[0].shape)}, test {tuple(data.test[0].shape)}, "
      f"ood sets {list(data.ood)}")

for mode in ("split_ensemble", "single_model"):
    cfg = harness.benchmark_config(mode, seed, epochs=epochs, warmup_epochs=2)
    run = harness.train_experiment(cfg, data)
    rows = harness.evaluate_models(run.models, cfg, run.spec, data)
    report = rows[-1].report
    print(f"\n{mode}: accuracy {report.accuracy:.3f}, AUROC {report.auroc:.3f}, "
          f"FPR@95 {report.fpr_at_95tpr:.3f}, FLOPs {run.model.flops()}")
    for event in run.histories[0].events():
        if event["event"] == "split":
            print(f"  epoch {event['epoch']}: split node {event['node']} at layer "
                  f"{event['layer_index']} into {event['partition']} (MCT {event['mct']:.3f})")
    prunes = run.histories[0].prunes
    if prunes:
        print(f"  {len(prunes)} prune rounds, FLOPs {prunes[0]['flops_before']} -> "
              f"{prunes[-1]['flops_after']} (budget {run.budget})")
