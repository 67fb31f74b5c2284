"""
Where should a shared backbone branch?
======================================

A fresh all-shared tree is scored layer by layer.  For every layer each
submodel keeps its top 20% most sensitive weights.  The overlap of those sets
between submodels forms a graph, and the minimal cutting threshold (MCT) of
that graph says how separable the submodels are at that depth.  The first
layer below the threshold is split, and the outputs do not change.
"""

import torch

from split_ensemble import SplitEnsembleLoss, SubtaskSpec, build_backbone, init_shared
from split_ensemble.data import make_blobs
from split_ensemble.sensitivity import compute_masks, find_split, mct_profile

torch.manual_seed(0)
blobs = make_blobs(n_classes=8, per_class=40, size=16, holdout_classes=0)
x, y = torch.as_tensor(blobs.train[0]), torch.as_tensor(blobs.train[1])

spec = SubtaskSpec(8, ((0, 1), (2, 3), (4, 5), (6, 7)), per_class_count=40)
blocks = [{"kind": "conv", "out": 8}, {"kind": "pool"}, {"kind": "conv", "out": 16},
          {"kind": "conv", "out": 16}]
model = init_shared(build_backbone(blocks, 1), spec, (1, 16, 16))
loss = SplitEnsembleLoss(spec, beta=0.999)

masks = compute_masks(model, (x[:256], y[:256]), loss, k_fraction=0.2)
for row in mct_profile(model, masks):
    print(f"layer {row['layer']}  depth {row['depth']}  MCT {row['mct']:.3f}  "
          f"submodels {row['submodels']}")

decision = find_split(model, masks, threshold=0.4)
print("split decision:", decision)

if decision is not None:
    model.eval()
    with torch.no_grad():
        before = [o.clone() for o in model(x[:64])]
        model.split_at(decision.node, decision.layer_index, decision.partition)
        after = model(x[:64])
    drift = max(float((a - b).abs().max()) for a, b in zip(after, before))
    print(f"nodes now {model.node_ids()}, max output change {drift:.2e}")
    print(model.to_dot())
