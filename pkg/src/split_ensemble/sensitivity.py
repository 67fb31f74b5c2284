"""Per-subtask weight sensitivity, mask correlation and split selection."""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

SENSITIVITY_EPS = 1e-12


@contextmanager
def frozen_norm_stats(model: nn.Module):
    """Train-mode forward (batch statistics) that leaves BN running stats untouched."""
    was_training = model.training
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [(m.momentum, m.num_batches_tracked.clone()) for m in bns]
    model.train()
    for m in bns:
        m.momentum = 0.0
    try:
        yield model
    finally:
        for m, (mom, nbt) in zip(bns, saved):
            m.momentum = mom
            m.num_batches_tracked.copy_(nbt)
        model.train(was_training)


def normalize_sensitivity(g, eps: float = SENSITIVITY_EPS) -> np.ndarray:
    """``|g| / sum |g|`` with ``eps`` added so an all-zero vector maps to uniform."""
    a = np.abs(np.asarray(g, dtype=np.float64)).ravel() + eps
    return a / a.sum()


def weight_gradient_products(model, submodel: int, batch, loss, layers) -> dict:
    """``w * dL_i/dw`` for the weights of each requested layer (flattened, concatenated)."""
    x, y = batch
    weights = {lid: model.layer(lid).sensitivity_weights() for lid in layers}
    flat = [w for ws in weights.values() for w in ws]
    with frozen_norm_stats(model):
        logits = model(x)
        value = loss.submodel_loss(submodel, logits[submodel], y)
        grads = torch.autograd.grad(value, flat, allow_unused=True)
    lookup = {id(w): g for w, g in zip(flat, grads)}
    out = {}
    for lid, ws in weights.items():
        parts = []
        for w in ws:
            g = lookup[id(w)]
            g = torch.zeros_like(w) if g is None else g
            parts.append((w.detach() * g).reshape(-1))
        out[lid] = torch.cat(parts).double().numpy() if parts else np.zeros(0)
    return out


def snip_sensitivity(model, layer, submodel: int, batch, loss) -> np.ndarray:
    """Normalized connection sensitivity of one layer's weights for one submodel."""
    nid, _ = layer
    if submodel not in model.node(nid).submodels:
        raise ValueError(f"layer {layer} is not on the path of submodel {submodel}")
    if not model.layer(layer).sensitivity_weights():
        raise ValueError(f"layer {layer} has no weights")
    g = weight_gradient_products(model, submodel, batch, loss, [layer])[layer]
    return normalize_sensitivity(g)


@dataclass(frozen=True, eq=False)
class SensitivityMask:
    layer: tuple
    submodel: int
    selected: np.ndarray
    k_fraction: float
    size: int


def topk_mask(sensitivities, k_fraction: float, layer=None, submodel: int = -1) -> SensitivityMask:
    """Indices of the ``ceil(k * len)`` largest entries; ties go to the lower index."""
    s = np.asarray(sensitivities, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("empty sensitivity vector")
    if not 0.0 < k_fraction <= 1.0:
        raise ValueError(f"k_fraction must lie in (0, 1], got {k_fraction}")
    m = max(1, math.ceil(k_fraction * s.size - 1e-9))
    order = np.argsort(-s, kind="stable")
    return SensitivityMask(layer, submodel, np.sort(order[:m]), k_fraction, s.size)


def iou(a: SensitivityMask, b: SensitivityMask) -> float:
    if a.layer != b.layer or a.size != b.size:
        raise ValueError(f"masks belong to different layers ({a.layer} vs {b.layer})")
    inter = np.intersect1d(a.selected, b.selected, assume_unique=True).size
    union = a.selected.size + b.selected.size - inter
    return inter / union if union else 1.0


@dataclass
class CorrelationGraph:
    """Weighted complete graph over submodels; ``weights[a, b]`` is the IoU."""

    vertices: tuple
    weights: np.ndarray

    def weight(self, u, v) -> float:
        return float(self.weights[self.vertices.index(u), self.vertices.index(v)])

    @classmethod
    def from_masks(cls, masks: dict) -> "CorrelationGraph":
        verts = tuple(sorted(masks))
        w = np.full((len(verts), len(verts)), np.nan)
        for a, b in itertools.combinations(range(len(verts)), 2):
            w[a, b] = w[b, a] = iou(masks[verts[a]], masks[verts[b]])
        return cls(verts, w)


def _check_graph(graph: CorrelationGraph) -> None:
    if len(graph.vertices) < 2:
        raise ValueError("MCT needs at least two vertices")


def maximum_spanning_tree(graph: CorrelationGraph) -> list[tuple[float, int, int]]:
    """Kruskal on descending weight; edges as ``(w, a, b)`` with vertex positions."""
    n = len(graph.vertices)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = sorted(((graph.weights[a, b], a, b) for a, b in itertools.combinations(range(n), 2)),
                   key=lambda e: (-e[0], e[1], e[2]))
    tree = []
    for w, a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            tree.append((float(w), a, b))
    return tree


def mct(graph: CorrelationGraph) -> float:
    """Minimal cutting threshold: the bottleneck edge of the maximum spanning tree."""
    _check_graph(graph)
    return min(w for w, _, _ in maximum_spanning_tree(graph))


def _components_above(graph: CorrelationGraph, threshold: float) -> list[list[int]]:
    n = len(graph.vertices)
    comp = [-1] * n
    groups = []
    for start in range(n):
        if comp[start] >= 0:
            continue
        comp[start] = len(groups)
        stack, members = [start], []
        while stack:
            a = stack.pop()
            members.append(a)
            for b in range(n):
                if b != a and comp[b] < 0 and graph.weights[a, b] > threshold:
                    comp[b] = comp[start]
                    stack.append(b)
        groups.append(sorted(members))
    return groups


def mct_partition(graph: CorrelationGraph) -> tuple[tuple, tuple]:
    """A bipartition achieving the MCT.

    Among all optimal cuts, returns the one whose side ``S`` holds the first
    vertex and is lexicographically smallest as a sorted tuple.
    """
    value = mct(graph)
    comps = _components_above(graph, value)
    first, rest = comps[0], comps[1:]
    best = None
    for r in range(len(rest)):
        for extra in itertools.combinations(rest, r):
            s = tuple(sorted(first + [v for c in extra for v in c]))
            if best is None or s < best:
                best = s
    return _label(graph, best)


def _label(graph, s_pos):
    s = tuple(graph.vertices[i] for i in s_pos)
    t = tuple(v for i, v in enumerate(graph.vertices) if i not in s_pos)
    return s, t


def _bipartitions(n: int):
    # vertex 0 always in S; T nonempty
    for mask in range(2 ** (n - 1) - 1):
        yield (0,) + tuple(i + 1 for i in range(n - 1) if mask >> i & 1)


def _crossing_max(graph, s_pos):
    t_pos = [i for i in range(len(graph.vertices)) if i not in s_pos]
    return max(graph.weights[a, b] for a in s_pos for b in t_pos)


def mct_bruteforce(graph: CorrelationGraph) -> float:
    """Exhaustive minimax over all bipartitions (reference oracle, small graphs)."""
    _check_graph(graph)
    return float(min(_crossing_max(graph, s) for s in _bipartitions(len(graph.vertices))))


def mct_partition_bruteforce(graph: CorrelationGraph) -> tuple[tuple, tuple]:
    _check_graph(graph)
    best_val, best_s = math.inf, None
    for s in _bipartitions(len(graph.vertices)):
        v = _crossing_max(graph, s)
        if v < best_val or (v == best_val and s < best_s):
            best_val, best_s = v, s
    return _label(graph, best_s)


@dataclass
class SplitDecision:
    node: int
    layer_index: int
    partition: tuple
    mct: float


def candidate_layers(model) -> list[tuple[int, int]]:
    """Weighted layers of leaf branches still shared by several submodels,
    shallowest first."""
    out = []
    for nid in model.leaves():
        node = model.node(nid)
        if len(node.submodels) < 2:
            continue
        for i, layer in enumerate(node.layers):
            if layer.sensitivity_weights():
                out.append((nid, i))
    return sorted(out, key=lambda lid: (model.layer_depth(lid), lid))


def compute_masks(model, batch, loss, k_fraction: float = 0.2, layers=None) -> dict:
    """Top-K masks for every candidate layer and every submodel sharing it."""
    layers = candidate_layers(model) if layers is None else list(layers)
    by_sub: dict[int, list] = {}
    for lid in layers:
        for s in model.node(lid[0]).submodels:
            by_sub.setdefault(s, []).append(lid)
    masks: dict = {lid: {} for lid in layers}
    for s, lids in sorted(by_sub.items()):
        products = weight_gradient_products(model, s, batch, loss, lids)
        for lid in lids:
            masks[lid][s] = topk_mask(normalize_sensitivity(products[lid]), k_fraction, lid, s)
    return masks


def mct_profile(model, masks: dict) -> list[dict]:
    """Per-layer IoU matrices and MCT values, JSON-friendly, shallowest first."""
    rows = []
    for lid in sorted(masks, key=lambda l: (model.layer_depth(l), l)):
        if len(masks[lid]) < 2:
            continue
        g = CorrelationGraph.from_masks(masks[lid])
        rows.append({"layer": list(lid), "depth": model.layer_depth(lid),
                     "submodels": list(g.vertices),
                     "iou": np.nan_to_num(g.weights, nan=1.0).round(6).tolist(),
                     "mct": mct(g)})
    return rows


def find_split(model, masks: dict, threshold: float) -> SplitDecision | None:
    """Earliest candidate layer whose correlation graph has MCT below ``threshold``."""
    for lid in candidate_layers(model):
        layer_masks = masks.get(lid)
        if not layer_masks or len(layer_masks) < 2:
            continue
        g = CorrelationGraph.from_masks(layer_masks)
        value = mct(g)
        if value < threshold:
            return SplitDecision(lid[0], lid[1], mct_partition(g), value)
    return None
