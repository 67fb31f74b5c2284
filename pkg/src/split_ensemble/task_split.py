"""Complementary subtask splitting, label conversion and the training losses.

A multiclass task over ``N`` classes is partitioned into disjoint class
groups.  Subtask ``i`` classifies among the ``K_i`` classes of its group plus
one extra "OOD" slot (index ``K_i``) that absorbs every other class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

OOD_AWARE = "ood_aware"
ONE_HOT = "one_hot"
TARGET_MODES = (OOD_AWARE, ONE_HOT)

SIGMOID_EPS = 1e-7


@dataclass(frozen=True)
class SubtaskSpec:
    total_classes: int
    groups: tuple[tuple[int, ...], ...]
    per_class_count: float = 1.0

    def __post_init__(self):
        groups = tuple(tuple(int(c) for c in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if self.total_classes < 1:
            raise ValueError("total_classes must be >= 1")
        if not groups:
            raise ValueError("at least one class group is required")
        seen: set[int] = set()
        for i, g in enumerate(groups):
            if not g:
                raise ValueError(f"group {i} is empty")
            for c in g:
                if not 0 <= c < self.total_classes:
                    raise ValueError(f"unknown class id {c} in group {i}")
                if c in seen:
                    raise ValueError(f"class {c} appears in more than one group")
                seen.add(c)
        if len(seen) != self.total_classes:
            missing = sorted(set(range(self.total_classes)) - seen)
            raise ValueError(f"groups do not cover classes {missing}")
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be >= 1")

    @property
    def n_subtasks(self) -> int:
        return len(self.groups)

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    @property
    def head_widths(self) -> tuple[int, ...]:
        return tuple(len(g) + 1 for g in self.groups)

    @property
    def class_order(self) -> np.ndarray:
        """Original class id of each column of the concatenated ID logits."""
        return np.array([c for g in self.groups for c in g], dtype=np.int64)

    def locate(self, label: int) -> tuple[int, int]:
        """Return ``(subtask, position)`` owning an original class id."""
        for i, g in enumerate(self.groups):
            if label in g:
                return i, g.index(label)
        raise ValueError(f"label {label} outside 0..{self.total_classes - 1}")

    def to_dict(self) -> dict:
        return {
            "total_classes": self.total_classes,
            "groups": [list(g) for g in self.groups],
            "per_class_count": self.per_class_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubtaskSpec":
        return cls(d["total_classes"], tuple(tuple(g) for g in d["groups"]),
                   d.get("per_class_count", 1.0))


@dataclass(frozen=True)
class ClassBalancedWeights:
    beta: float
    weights: np.ndarray = field(compare=False)


def _check_subtask(spec: SubtaskSpec, subtask_index: int) -> None:
    if not 0 <= subtask_index < spec.n_subtasks:
        raise IndexError(f"subtask index {subtask_index} out of range")


def convert_label(spec: SubtaskSpec, subtask_index: int, original_label: int,
                  ood_target_mode: str = OOD_AWARE) -> np.ndarray:
    """Target vector of length ``K_i + 1`` for one original label."""
    _check_subtask(spec, subtask_index)
    if not 0 <= original_label < spec.total_classes:
        raise ValueError(f"label {original_label} outside 0..{spec.total_classes - 1}")
    if ood_target_mode not in TARGET_MODES:
        raise ValueError(f"unknown ood_target_mode {ood_target_mode!r}")
    group = spec.groups[subtask_index]
    k = len(group)
    target = np.zeros(k + 1, dtype=np.float64)
    if original_label in group:
        target[group.index(original_label)] = 1.0
    elif ood_target_mode == ONE_HOT:
        target[k] = 1.0
    else:
        n = spec.total_classes
        target[:k] = 1.0 / n
        target[k] = (n - k) / n
    return target


def target_table(spec: SubtaskSpec, subtask_index: int,
                 ood_target_mode: str = OOD_AWARE) -> np.ndarray:
    """``(N, K_i + 1)`` matrix whose row ``y`` is ``convert_label(..., y)``."""
    return np.stack([convert_label(spec, subtask_index, y, ood_target_mode)
                     for y in range(spec.total_classes)])


def _one_minus_pow(beta: float, m: float) -> float:
    # 1 - beta**m without cancellation for beta -> 1 or large m
    return -math.expm1(m * math.log(beta))


def class_balanced_weights(spec: SubtaskSpec, subtask_index: int,
                           beta: float) -> ClassBalancedWeights:
    """Per-slot loss weights: effective-number reweighting of ID vs OOD slots."""
    _check_subtask(spec, subtask_index)
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    k = len(spec.groups[subtask_index])
    n_ood = spec.total_classes - k
    if n_ood == 0:
        raise ValueError("subtask covers every class, so its OOD slot has no samples")
    n = spec.per_class_count
    w = np.ones(k + 1, dtype=np.float64)
    if beta > 0.0:
        w[:k] = (1.0 - beta) / _one_minus_pow(beta, n)
        w[k] = (1.0 - beta) / _one_minus_pow(beta, n_ood * n)
    return ClassBalancedWeights(beta, w)


def cb_bce_loss(logits, target, weights, eps: float = SIGMOID_EPS) -> torch.Tensor:
    """Weighted binary cross entropy summed over slots, mean over the batch.

    ``logits`` and ``target`` are ``(K+1,)`` or ``(B, K+1)``; ``weights`` is a
    ``ClassBalancedWeights`` or anything convertible to a ``(K+1,)`` tensor.
    """
    logits = torch.as_tensor(logits)
    if not logits.is_floating_point():
        logits = logits.double()
    target = torch.as_tensor(target, dtype=logits.dtype, device=logits.device)
    if isinstance(weights, ClassBalancedWeights):
        weights = weights.weights
    weights = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    if logits.shape != target.shape or logits.shape[-1] != weights.shape[-1]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)}, "
                         f"target {tuple(target.shape)}, weights {tuple(weights.shape)}")
    p = torch.sigmoid(logits).clamp(eps, 1.0 - eps)
    per_slot = -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
    per_sample = (per_slot * weights).sum(-1)
    return per_sample.mean() if per_sample.dim() else per_sample


def concat_id_logits(submodel_logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """Drop each submodel's OOD slot and concatenate the rest in group order."""
    return torch.cat([x[..., :-1] for x in submodel_logits], dim=-1)


def ensemble_loss(submodel_logits, converted_targets, concatenated_id_logits,
                  original_label, lam: float = 1e-4, weights=None) -> torch.Tensor:
    """Sum of per-submodel weighted BCE plus ``lam`` times softmax cross entropy.

    ``original_label`` must already be expressed as a column index into
    ``concatenated_id_logits`` (see ``SubtaskSpec.class_order``).
    """
    if len(submodel_logits) != len(converted_targets):
        raise ValueError(f"{len(submodel_logits)} logits vs {len(converted_targets)} targets")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if weights is None:
        weights = [np.ones(torch.as_tensor(x).shape[-1]) for x in submodel_logits]
    if len(weights) != len(submodel_logits):
        raise ValueError("one weight vector per submodel is required")
    total = sum(cb_bce_loss(x, t, w) for x, t, w in
                zip(submodel_logits, converted_targets, weights))
    if lam == 0:
        return total
    z = torch.as_tensor(concatenated_id_logits)
    y = torch.as_tensor(original_label, dtype=torch.long, device=z.device)
    if z.dim() == 1:
        z, y = z.unsqueeze(0), y.reshape(1)
    return total + lam * F.cross_entropy(z, y)


class SplitEnsembleLoss:
    """Batched joint objective for a whole split ensemble.

    Target tables and class-balanced weights are precomputed per subtask, so a
    call only needs the per-submodel logits and the original labels.
    ``normalize_weights`` rescales each subtask's weights to sum to ``K_i + 1``
    (a per-subtask constant; the relative ID/OOD balance is unchanged).
    """

    def __init__(self, spec: SubtaskSpec, beta: float = 0.9999, lam: float = 1e-4,
                 ood_target_mode: str = OOD_AWARE, normalize_weights: bool = True):
        self.spec = spec
        self.lam = lam
        self.ood_target_mode = ood_target_mode
        self.targets = [torch.as_tensor(target_table(spec, i, ood_target_mode))
                        for i in range(spec.n_subtasks)]
        self.weights = []
        for i in range(spec.n_subtasks):
            w = class_balanced_weights(spec, i, beta).weights
            if normalize_weights:
                w = w * (len(w) / w.sum())
            self.weights.append(torch.as_tensor(w))
        order = spec.class_order
        column = np.empty_like(order)
        column[order] = np.arange(len(order))
        self.column_of = torch.as_tensor(column)

    def submodel_loss(self, i: int, logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        t = self.targets[i].to(logits)[labels]
        return cb_bce_loss(logits, t, self.weights[i].to(logits))

    def __call__(self, submodel_logits: Sequence[torch.Tensor], labels: torch.Tensor) -> torch.Tensor:
        if len(submodel_logits) != self.spec.n_subtasks:
            raise ValueError(f"expected {self.spec.n_subtasks} submodel outputs, "
                             f"got {len(submodel_logits)}")
        total = sum(self.submodel_loss(i, x, labels) for i, x in enumerate(submodel_logits))
        if self.lam:
            z = concat_id_logits(submodel_logits)
            total = total + self.lam * F.cross_entropy(z, self.column_of.to(labels.device)[labels])
        return total

    def predict(self, submodel_logits: Sequence[torch.Tensor]) -> torch.Tensor:
        cols = concat_id_logits(submodel_logits).argmax(-1)
        return torch.as_tensor(self.spec.class_order, device=cols.device)[cols]


class CrossEntropyObjective:
    """Plain softmax classifier objective used by the single-model and naive
    ensemble baselines; every head is a full ``N``-way classifier."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes

    def submodel_loss(self, i, logits, labels):
        return F.cross_entropy(logits, labels)

    def __call__(self, submodel_logits, labels):
        return sum(F.cross_entropy(x, labels) for x in submodel_logits)

    def predict(self, submodel_logits):
        return torch.stack(list(submodel_logits)).mean(0).argmax(-1)


def group_classes(n_classes: int, n_splits: int, strategy: str = "random", *,
                  class_semantics: dict[int, str] | None = None,
                  groups: Sequence[Sequence[int]] | None = None,
                  seed: int = 0, per_class_count: float = 1.0) -> SubtaskSpec:
    """Build a ``SubtaskSpec``.

    ``semantic`` packs whole supergroups (from ``class_semantics``, class id ->
    supergroup name) into ``n_splits`` groups, greedily balancing class counts;
    ``random`` shuffles class ids with ``seed`` and chunks them; ``explicit``
    takes ``groups`` verbatim.
    """
    if n_splits < 1 or n_splits > n_classes:
        raise ValueError(f"cannot split {n_classes} classes into {n_splits} groups")
    if strategy == "explicit":
        if groups is None:
            raise ValueError("explicit grouping needs `groups`")
        if len(groups) != n_splits:
            raise ValueError(f"{len(groups)} explicit groups given, n_splits={n_splits}")
        out = [list(g) for g in groups]
    elif strategy == "random":
        perm = np.random.default_rng(seed).permutation(n_classes)
        out = [sorted(int(c) for c in chunk) for chunk in np.array_split(perm, n_splits)]
    elif strategy == "semantic":
        if class_semantics is None:
            raise ValueError("semantic grouping needs a class -> supergroup table")
        unknown = sorted(set(class_semantics) - set(range(n_classes)))
        if unknown:
            raise ValueError(f"unknown class ids in grouping table: {unknown}")
        missing = sorted(set(range(n_classes)) - set(class_semantics))
        if missing:
            raise ValueError(f"classes without a supergroup: {missing}")
        supers: dict[str, list[int]] = {}
        for c in range(n_classes):
            supers.setdefault(str(class_semantics[c]), []).append(c)
        if len(supers) < n_splits:
            raise ValueError(f"{len(supers)} supergroups cannot fill {n_splits} groups")
        # largest supergroup first into the currently smallest group
        ordered = sorted(supers.items(), key=lambda kv: (-len(kv[1]), kv[1][0]))
        out = [[] for _ in range(n_splits)]
        for _, members in ordered:
            target = min(range(n_splits), key=lambda i: (len(out[i]), i))
            out[target].extend(members)
        out = [sorted(g) for g in out]
    else:
        raise ValueError(f"unknown grouping strategy {strategy!r}")
    return SubtaskSpec(n_classes, tuple(tuple(g) for g in out), per_class_count)


def load_grouping_table(path) -> dict[int, str]:
    """Read a class -> supergroup table.

    JSON files hold ``{"<class id>": "<group>"}``; any other file is read as
    whitespace separated ``class_id group_name`` lines (``#`` comments allowed).
    """
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return {int(k): str(v) for k, v in json.loads(text).items()}
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'class_id group'")
        table[int(parts[0])] = parts[1]
    return table
