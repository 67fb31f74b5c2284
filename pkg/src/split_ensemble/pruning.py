"""Global structural pruning of a split-ensemble tree.

A prunable structure is one index of a channel space (see ``tree_model``):
removing it drops the matching output filter of every producer unit and the
matching input slice of every consumer, heads included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .sensitivity import frozen_norm_stats


@dataclass(frozen=True)
class ImportanceScore:
    structure: tuple[str, int]
    submodel: int
    score: float


@dataclass
class PrunePlan:
    removals: list[tuple[str, int]] = field(default_factory=list)
    flops_before: int = 0
    flops_after: int = 0

    def __bool__(self):
        return bool(self.removals)

    def to_dict(self) -> dict:
        return {"removals": [list(r) for r in self.removals],
                "flops_before": self.flops_before, "flops_after": self.flops_after}


def structural_importance(model, submodel: int, batch, loss) -> list[ImportanceScore]:
    """Squared ``sum(w * dL_i/dw)`` per filter on the submodel's path.

    Filters tied together by an identity residual form one group whose score
    is the max of its members.  Scores are not normalized per layer.
    """
    x, y = batch
    spaces = [sp for sp in model.channel_spaces().values() if sp.prunable
              and submodel in sp.submodels]
    params = [p for sp in spaces for u in sp.producers for p in u.filter_params()]
    with frozen_norm_stats(model):
        logits = model(x)
        value = loss.submodel_loss(submodel, logits[submodel], y)
        grads = torch.autograd.grad(value, params, allow_unused=True)
    lookup = {p: g for p, g in zip(params, grads) if g is not None}
    out = []
    for sp in spaces:
        per_member = [u.filter_dot(lookup).double() ** 2 for u in sp.producers]
        group = torch.stack(per_member).max(0).values
        out.extend(ImportanceScore((sp.space_id, j), submodel, float(v))
                   for j, v in enumerate(group.tolist()))
    return out


def all_importances(model, batch, loss) -> list[ImportanceScore]:
    return [s for i in range(model.n_submodels)
            for s in structural_importance(model, i, batch, loss)]


def default_n_remove(model, fraction: float = 0.02) -> int:
    total = sum(sp.size for sp in model.channel_spaces().values() if sp.prunable)
    return max(1, round(fraction * total))


def plan_prune(scores, model, n_remove: int) -> PrunePlan:
    """Greedy bottom-``n_remove`` per submodel, intersected across sharing submodels."""
    if n_remove < 1:
        raise ValueError("n_remove must be >= 1")
    spaces = model.channel_spaces()
    flops_before = model.flops()
    by_sub: dict[int, list[ImportanceScore]] = {}
    for s in scores:
        sp = spaces.get(s.structure[0])
        if sp is None:
            raise ValueError(f"unknown channel space {s.structure[0]!r}")
        if sp.prunable and sp.size > 1:
            by_sub.setdefault(s.submodel, []).append(s)

    def rank(s):
        return (s.score, spaces[s.structure[0]].order, s.structure[1])

    bottom = {sub: {s.structure for s in sorted(lst, key=rank)[:n_remove]}
              for sub, lst in by_sub.items()}
    worst: dict[tuple[str, int], float] = {}
    for s in scores:
        worst[s.structure] = max(worst.get(s.structure, 0.0), s.score)

    chosen = set()
    for structure in set().union(*bottom.values()) if bottom else ():
        sharing = spaces[structure[0]].submodels
        if all(structure in bottom.get(sub, ()) for sub in sharing):
            chosen.add(structure)

    # keep at least one filter per space: give back the most important ones
    for sid, sp in spaces.items():
        mine = sorted((c for c in chosen if c[0] == sid), key=lambda c: (worst[c], c[1]))
        while len(mine) >= sp.size:
            chosen.discard(mine.pop())

    removals = sorted(chosen, key=lambda c: (spaces[c[0]].order, c[1]))
    counts: dict[str, int] = {}
    for sid, _ in removals:
        counts[sid] = counts.get(sid, 0) + 1
    after = model.flops(channel_sizes={sid: spaces[sid].size - k for sid, k in counts.items()})
    return PrunePlan(removals, flops_before, after)


def apply_prune(model, plan: PrunePlan, optimizer=None):
    """Remove the planned filters in place (momentum buffers sliced alongside)."""
    spaces = model.channel_spaces()
    drop: dict[str, set[int]] = {}
    for sid, j in plan.removals:
        sp = spaces.get(sid)
        if sp is None or not sp.prunable:
            raise ValueError(f"plan references unprunable space {sid!r}")
        if not 0 <= j < sp.size:
            raise ValueError(f"filter {j} out of range for space {sid!r} (size {sp.size})")
        drop.setdefault(sid, set()).add(j)
    for sid, idx in drop.items():
        sp = spaces[sid]
        if len(idx) >= sp.size:
            raise ValueError(f"plan would remove every filter of space {sid!r}")
        keep = torch.tensor([j for j in range(sp.size) if j not in idx], dtype=torch.long)
        for u in sp.producers:
            u.prune_out(keep, optimizer)
        for u in sp.consumers:
            u.prune_in(keep, optimizer)
    model.check_channels()
    if drop and model.flops() != plan.flops_after:
        raise RuntimeError(f"FLOPs after pruning {model.flops()} != planned {plan.flops_after}")
    return model


def zero_structures(model, removals) -> None:
    """Masking reference: zero every producer parameter of the given structures."""
    spaces = model.channel_spaces()
    for sid, j in removals:
        for u in spaces[sid].producers:
            u.zero_filters(j)
