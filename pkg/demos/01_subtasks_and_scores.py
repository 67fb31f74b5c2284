"""
Subtasks, soft targets and the ensemble score
=============================================

Eight classes are divided among four submodels.  Each submodel predicts its
own two classes plus one extra "none of mine" slot.  The script prints the
training targets, the class-balanced slot weights, and the OOD score that
comes out of combining the four heads.
"""

import numpy as np
import torch

from split_ensemble import SubtaskSpec, class_balanced_weights, convert_label, predict
from split_ensemble.task_split import target_table

spec = SubtaskSpec(8, ((0, 1), (2, 3), (4, 5), (6, 7)), per_class_count=500)
print("head widths:", spec.head_widths)

# A sample of class 5 as seen by submodel 0 (which owns classes 0 and 1)
# gets a soft target: a little mass on every owned slot, the rest on "other".
print("one-hot :", convert_label(spec, 0, 5, "one_hot"))
print("ood-aware:", convert_label(spec, 0, 5, "ood_aware"))
print(target_table(spec, 0))

# Slot weights from the effective number of samples: the "other" slot sees
# six classes' worth of data, so it is weighted down.
for beta in (0.9, 0.999, 0.9999):
    w = class_balanced_weights(spec, 0, beta).weights
    print(f"beta={beta}: id weight {w[0]:.3e}, other weight {w[-1]:.3e}, "
          f"ratio {w[0] / w[-1]:.2f}")

# Scoring: each submodel's softmax over its own classes, times the chance
# that the input belongs to it at all.  A confident owner gives a high score.
confident = [torch.tensor([4.0, 0.0, -2.0])] + [torch.tensor([-2.0, -2.0, 3.0])] * 3
unsure = [torch.tensor([0.0, 0.0, 0.0])] * 4
for name, logits in (("confident", confident), ("unsure", unsure)):
    out = predict(logits, spec)
    print(f"{name:9s} class {out.predicted_class} score {out.uncertainty_score:.4f} "
          f"p(other) {np.round(out.per_submodel_ood_prob, 3)}")
