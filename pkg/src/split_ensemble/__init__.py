"""Split-Ensemble: subtask-split ensembles grown from one backbone by
sensitivity-guided splitting and budgeted structural pruning."""

from .evaluation import (MetricsReport, auroc, aupr, detection_error, fpr_detection_error,
                         gen_noise_ood, ood_metrics, threshold_at_tpr)
from .inference import EnsembleOutput, msp_score, ood_decision, predict
from .pruning import (ImportanceScore, PrunePlan, apply_prune, plan_prune,
                      structural_importance)
from .sensitivity import (CorrelationGraph, SensitivityMask, find_split, iou, mct,
                          mct_partition, snip_sensitivity, topk_mask)
from .task_split import (ClassBalancedWeights, SplitEnsembleLoss, SubtaskSpec,
                         cb_bce_loss, class_balanced_weights, convert_label, ensemble_loss,
                         group_classes)
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train
from .tree_model import LayerSpec, TreeModel, build_backbone, flops, init_shared, split_at

__version__ = "0.1.0"

__all__ = [
    "ClassBalancedWeights", "CorrelationGraph", "EnsembleOutput", "ImportanceScore",
    "LayerSpec", "MetricsReport", "PrunePlan", "SensitivityMask", "SplitEnsembleLoss",
    "SubtaskSpec", "TrainConfig", "TreeModel", "apply_prune", "auroc", "aupr",
    "build_backbone", "cb_bce_loss", "class_balanced_weights", "convert_label",
    "detection_error", "ensemble_loss", "find_split", "flops", "fpr_detection_error",
    "gen_noise_ood", "group_classes", "init_shared", "iou", "load_checkpoint", "mct",
    "mct_partition", "msp_score", "ood_decision", "ood_metrics", "plan_prune", "predict",
    "save_checkpoint", "snip_sensitivity", "split_at", "structural_importance",
    "threshold_at_tpr", "topk_mask", "train",
]
