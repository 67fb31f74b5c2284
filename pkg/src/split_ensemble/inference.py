"""Ensemble prediction and the OOD score built from per-submodel outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

ID, OOD = "ID", "OOD"


@dataclass
class EnsembleOutput:
    concatenated_id_logits: np.ndarray
    per_submodel_ood_prob: np.ndarray
    predicted_class: np.ndarray
    uncertainty_score: np.ndarray


def _as_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def predict(submodel_logits, spec) -> EnsembleOutput:
    """Combine submodel logits into class predictions and scores.

    Works on single vectors (``(K_i+1,)`` each) or batches (``(B, K_i+1)``).
    The score of class ``y`` owned by submodel ``i`` is the softmax
    probability of ``y`` within ``i`` times one minus ``i``'s OOD probability;
    the reported score is the max over classes.
    """
    logits = [_as_numpy(x) for x in submodel_logits]
    if len(logits) != spec.n_subtasks:
        raise ValueError(f"expected {spec.n_subtasks} submodel outputs, got {len(logits)}")
    for i, (x, w) in enumerate(zip(logits, spec.head_widths)):
        if x.shape[-1] != w:
            raise ValueError(f"submodel {i}: width {x.shape[-1]} != {w}")
    single = logits[0].ndim == 1
    if single:
        logits = [x[None] for x in logits]
    id_logits = np.concatenate([x[:, :-1] for x in logits], axis=1)
    probs = [softmax(x, axis=1) for x in logits]
    ood = np.stack([p[:, -1] for p in probs], axis=1)
    joint = np.concatenate([p[:, :-1] * (1.0 - p[:, -1:]) for p in probs], axis=1)
    order = spec.class_order
    out = EnsembleOutput(id_logits, ood, order[id_logits.argmax(1)], joint.max(1))
    if single:
        out = EnsembleOutput(*(a[0] for a in (out.concatenated_id_logits,
                                              out.per_submodel_ood_prob,
                                              out.predicted_class,
                                              out.uncertainty_score)))
    return out


def msp_score(logits) -> np.ndarray:
    """Max softmax probability (single model), or of the mean logits (ensembles)."""
    if isinstance(logits, (list, tuple)):
        logits = np.mean([_as_numpy(x) for x in logits], axis=0)
    return softmax(_as_numpy(logits), axis=-1).max(-1)


def ood_decision(score, threshold: float):
    """``OOD`` when the score is strictly below the threshold, else ``ID``."""
    s = np.asarray(score)
    out = np.where(s < threshold, OOD, ID)
    return str(out) if out.ndim == 0 else out
