"""Joint training with interleaved splitting and pruning."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from .pruning import all_importances, apply_prune, default_n_remove, plan_prune
from .sensitivity import compute_masks, find_split
from .task_split import OOD_AWARE, SplitEnsembleLoss, SubtaskSpec, TARGET_MODES
from .tree_model import TreeModel

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = "split-ensemble-ckpt/1"


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(OSError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    warmup_epochs: int = 10
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256
    lam: float = 1e-4
    beta: float = 0.9999
    normalize_cb_weights: bool = True
    ood_target_mode: str = OOD_AWARE
    mct_threshold: float = 0.4
    k_fraction: float = 0.2
    sensitivity_batch_size: int = 256
    prune_interval: int = 5
    n_remove: int | None = None
    n_remove_fraction: float = 0.02
    flops_budget: int | None = None
    # architecture changes happen only up to this fraction of training; at the
    # last allowed check pruning repeats until the budget is met
    arch_until: float = 0.7
    prune_to_budget: bool = True
    max_prune_rounds: int = 500
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.prune_interval < 1:
            problems.append("prune_interval must be >= 1")
        if self.flops_budget is not None and self.flops_budget <= 0:
            problems.append("flops_budget must be > 0")
        if not 0.0 <= self.beta < 1.0:
            problems.append("beta must lie in [0, 1)")
        if not 0.0 < self.k_fraction <= 1.0:
            problems.append("k_fraction must lie in (0, 1]")
        if self.ood_target_mode not in TARGET_MODES:
            problems.append(f"ood_target_mode must be one of {TARGET_MODES}")
        if self.lam < 0:
            problems.append("lam must be >= 0")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown train config keys: {unknown}")
        return cls(**d)

    def arch_epochs(self) -> list[int]:
        """Epochs (1-based, counted after the epoch finishes) that may change the architecture."""
        last = max(self.warmup_epochs, math.floor(self.arch_until * self.epochs))
        return [e for e in range(max(1, self.warmup_epochs), min(last, self.epochs) + 1)
                if e % self.prune_interval == 0]


@dataclass
class History:
    epochs: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    prunes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "History":
        return cls(list(d["epochs"]), list(d["splits"]), list(d["prunes"]))

    def events(self) -> list[dict]:
        return self.splits + self.prunes


@dataclass
class TrainState:
    model: TreeModel
    optimizer: torch.optim.Optimizer | None
    history: History
    spec: SubtaskSpec | None
    cfg: TrainConfig | None
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def make_optimizer(model, cfg: TrainConfig, previous=None) -> torch.optim.SGD:
    """SGD over the current parameters, carrying momentum from ``previous``."""
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    if previous is not None:
        for group in opt.param_groups:
            group["lr"] = previous.param_groups[0]["lr"]
        for p in model.parameters():
            if p in previous.state:
                opt.state[p] = previous.state[p]
    return opt


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Linear warmup then cosine decay; ``epoch`` is 0-based."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    span = max(1, cfg.epochs - cfg.warmup_epochs)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (epoch - cfg.warmup_epochs) / span))


class EventLog:
    """Append-only JSON-lines sink; ``None`` path keeps events in memory only."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, event: dict) -> None:
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")


def _epoch_generator(seed: int, epoch: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed * 1_000_003 + epoch)


@torch.no_grad()
def evaluate_accuracy(model, loss, x, y, batch_size: int = 1024) -> float:
    was = model.training
    model.eval()
    correct = 0
    for i in range(0, len(x), batch_size):
        pred = loss.predict(model(x[i:i + batch_size]))
        correct += int((pred == y[i:i + batch_size]).sum())
    model.train(was)
    return correct / len(x)


def _sensitivity_batch(x, y, size, gen):
    idx = torch.randperm(len(x), generator=gen)[:size]
    return x[idx], y[idx]


def train(model: TreeModel, spec: SubtaskSpec, train_data, cfg: TrainConfig, *,
          val_data=None, loss=None, event_log=None, state: TrainState | None = None,
          stop_after: int | None = None, checkpoint=None):
    """Train ``model`` in place; returns ``(model, history)``.

    ``train_data``/``val_data`` are ``(x, y)`` tensor pairs with original
    labels.  ``loss`` defaults to the split-ensemble objective built from
    ``spec`` and ``cfg``.  Passing ``state`` resumes from a restored checkpoint;
    ``stop_after`` ends the run once that epoch (and its architecture step) is done.
    With ``checkpoint`` set, model, optimizer and history are saved there after
    every epoch.
    """
    x, y = train_data
    if len(x) != len(y) or len(x) == 0:
        raise ValueError("train data must be a nonempty (x, y) pair of equal length")
    if int(y.min()) < 0 or int(y.max()) >= spec.total_classes:
        raise ValueError("labels must lie in 0..N-1")
    if loss is None:
        loss = SplitEnsembleLoss(spec, cfg.beta, cfg.lam, cfg.ood_target_mode,
                                 cfg.normalize_cb_weights)
    sink = event_log if isinstance(event_log, EventLog) else EventLog(event_log)
    history = state.history if state is not None else History()
    optimizer = state.optimizer if state is not None and state.optimizer is not None \
        else make_optimizer(model, cfg)
    start = state.epoch if state is not None else 0
    budget = cfg.flops_budget or (state.extra.get("budget") if state is not None else None) \
        or model.flops()
    arch_epochs = cfg.arch_epochs()
    last_arch = arch_epochs[-1] if arch_epochs else None
    n = len(x)

    for epoch in range(start, cfg.epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        lr = learning_rate(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        gen = _epoch_generator(cfg.seed, epoch)
        model.train()
        perm = torch.randperm(n, generator=gen)
        total, seen, correct = 0.0, 0, 0
        for step, i in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[i:i + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            logits = model(xb)
            value = loss(logits, yb)
            if not torch.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value.item()} at epoch {epoch + 1}, "
                                       f"step {step} (lr={lr:.4g})")
            optimizer.zero_grad(set_to_none=True)
            value.backward()
            optimizer.step()
            total += value.item() * len(idx)
            seen += len(idx)
            with torch.no_grad():
                correct += int((loss.predict(logits) == yb).sum())
        done = epoch + 1
        record = {"event": "epoch", "epoch": done, "lr": lr, "loss": total / seen,
                  "train_acc": correct / seen, "flops": model.flops()}
        if val_data is not None:
            record["val_acc"] = evaluate_accuracy(model, loss, *val_data)
        history.epochs.append(record)
        sink.write(record)
        log.info("epoch %d loss %.4f acc %.3f flops %d", done, record["loss"],
                 record["train_acc"], record["flops"])

        if done in arch_epochs:
            optimizer = _architecture_step(model, optimizer, cfg, loss, x, y, gen, budget,
                                           done == last_arch, history, sink)
        if checkpoint is not None:
            save_checkpoint(checkpoint, model, spec, optimizer, history, cfg, done,
                            {"budget": budget})
    return model, history


def _architecture_step(model, optimizer, cfg, loss, x, y, gen, budget, last, history, sink):
    """At most one split, then pruning toward ``budget``; returns the live optimizer."""
    done = history.epochs[-1]["epoch"]
    batch = _sensitivity_batch(x, y, cfg.sensitivity_batch_size, gen)
    if cfg.mct_threshold > 0 and not model.all_private():
        masks = compute_masks(model, batch, loss, cfg.k_fraction)
        decision = find_split(model, masks, cfg.mct_threshold)
        if decision is not None:
            before = model.flops()
            model.split_at(decision.node, decision.layer_index, decision.partition, optimizer)
            optimizer = make_optimizer(model, cfg, optimizer)
            event = {"event": "split", "epoch": done, "node": decision.node,
                     "layer_index": decision.layer_index,
                     "partition": [list(p) for p in decision.partition],
                     "mct": decision.mct, "flops_before": before,
                     "flops_after": model.flops()}
            history.splits.append(event)
            sink.write(event)
    rounds = 0
    while model.flops() > budget and rounds < cfg.max_prune_rounds:
        n_remove = cfg.n_remove or default_n_remove(model, cfg.n_remove_fraction)
        scores = all_importances(model, batch, loss)
        plan = plan_prune(scores, model, n_remove)
        # empty intersection across sharing submodels: widen the candidate sets
        while not plan and n_remove < len(scores):
            n_remove *= 2
            plan = plan_prune(scores, model, n_remove)
        if not plan:
            log.info("epoch %d: nothing prunable", done)
            break
        apply_prune(model, plan, optimizer)
        rounds += 1
        event = {"event": "prune", "epoch": done, "round": rounds,
                 "removed": len(plan.removals), "n_remove": n_remove,
                 "flops_before": plan.flops_before,
                 "flops_after": plan.flops_after, "budget": budget}
        history.prunes.append(event)
        sink.write(event)
        if not (cfg.prune_to_budget and last):
            break
    return optimizer


# ------------------------------------------------------------ checkpoints --

def save_checkpoint(path, model: TreeModel, spec: SubtaskSpec | None = None, optimizer=None,
                    history: History | None = None, cfg: TrainConfig | None = None,
                    epoch: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": CHECKPOINT_SCHEMA,
        "arch": model.describe(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "history": history.to_dict() if history is not None else None,
        "spec": spec.to_dict() if spec is not None else None,
        "cfg": asdict(cfg) if cfg is not None else None,
        "epoch": epoch,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, spec: SubtaskSpec | None = None) -> TrainState:
    """Restore a checkpoint; ``spec``, when given, must match the stored one."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_SCHEMA} checkpoint")
    stored = SubtaskSpec.from_dict(payload["spec"]) if payload["spec"] else None
    if spec is not None and stored is not None and spec != stored:
        raise ValueError(f"checkpoint {path} was trained for subtasks {stored.groups}, "
                         f"not {spec.groups}")
    model = TreeModel.from_description(payload["arch"])
    model.load_state_dict(payload["state_dict"])
    cfg = TrainConfig(**payload["cfg"]) if payload["cfg"] else None
    optimizer = None
    if cfg is not None:
        optimizer = make_optimizer(model, cfg)
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
    history = History.from_dict(payload["history"]) if payload["history"] else History()
    return TrainState(model, optimizer, history, stored or spec, cfg, payload["epoch"],
                      payload["extra"])
