"""Experiment orchestration: data ingestion, training runs, evaluation
tables, ablation grids and architecture export.

Every run directory holds the resolved ``config.yaml``, one checkpoint per
trained network, ``events.jsonl`` and the final architecture as JSON and DOT.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data as datasets
from .config import (ConfigError, ExperimentConfig, apply_overrides, dump_config,
                     load_config, parse_config)
from .evaluation import MetricsReport, aupr, gen_noise_ood, mean_report, ood_metrics
from .inference import msp_score, predict
from .task_split import CrossEntropyObjective, SubtaskSpec, group_classes, load_grouping_table
from .trainer import EventLog, load_checkpoint, save_checkpoint, train
from .tree_model import TreeModel, build_backbone, init_shared

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("accuracy", "fpr_at_95tpr", "detection_error_at_95tpr", "auroc", "aupr")


# ------------------------------------------------------------------- data --

@dataclass
class LoadedData:
    train: tuple[torch.Tensor, torch.Tensor]
    test: tuple[torch.Tensor, torch.Tensor]
    n_classes: int
    input_shape: tuple[int, ...]
    # OOD set name -> images, or an error message when loading failed
    ood: dict = field(default_factory=dict)

    @property
    def per_class_count(self) -> float:
        return float(np.bincount(self.train[1].numpy(), minlength=self.n_classes).mean())


def _holdout_split(x, y, fraction=0.2, seed=0):
    perm = np.random.default_rng(seed).permutation(len(x))
    cut = int(round(len(x) * (1 - fraction)))
    return (x[perm[:cut]], y[perm[:cut]]), (x[perm[cut:]], y[perm[cut:]])


def _load_files(kind, path, test_path):
    if kind == "npz":
        loader = datasets.load_npz
    elif kind == "image_dir":
        loader = datasets.load_image_dir
    else:
        train = datasets.load_cifar(path, "train")
        return train, datasets.load_cifar(path, "test")
    x, y = loader(path)
    if y is None:
        raise ValueError(f"{path}: labels are required for the ID dataset")
    if test_path:
        return (x, y), loader(test_path)
    return _holdout_split(x, y)


def load_data(cfg: ExperimentConfig) -> LoadedData:
    """Load the ID train/test sets and every configured OOD set.

    A failing OOD set is stored as an error string so evaluation can still
    report the remaining rows.
    """
    ds = cfg.dataset
    holdout = None
    if ds.kind == "blobs":
        blobs = datasets.make_blobs(**asdict(ds.blobs))
        train, test, holdout = blobs.train, blobs.test, blobs.ood
        n_classes = blobs.n_classes
    else:
        train, test = _load_files(ds.kind, ds.path, ds.test_path)
        n_classes = int(max(train[1].max(), test[1].max())) + 1
    shape = tuple(train[0].shape[1:])
    ood = {}
    for o in ds.ood or []:
        try:
            if o.kind in ("gaussian", "uniform"):
                x = gen_noise_ood(o.kind, shape, o.count, o.seed)
            elif o.kind == "blob_holdout":
                if holdout is None or len(holdout) == 0:
                    raise ValueError("dataset has no held-out blob clusters")
                x = holdout
            else:
                x, _ = datasets.load_npz(o.path) if o.kind == "npz" \
                    else datasets.load_image_dir(o.path)
            if tuple(x.shape[1:]) != shape:
                raise ValueError(f"shape {tuple(x.shape[1:])} != ID shape {shape}")
            ood[o.name] = torch.as_tensor(np.asarray(x, dtype=np.float32))
        except Exception as exc:  # recorded per row, evaluation continues
            ood[o.name] = f"{type(exc).__name__}: {exc}"
    tensors = [(torch.as_tensor(np.asarray(x, dtype=np.float32)), torch.as_tensor(y).long())
               for x, y in (train, test)]
    return LoadedData(tensors[0], tensors[1], n_classes, shape, ood)


# ----------------------------------------------------------------- models --

def build_spec(cfg: ExperimentConfig, n_classes: int, per_class_count: float = 1.0) -> SubtaskSpec:
    if cfg.baseline != "split_ensemble":
        return SubtaskSpec(n_classes, (tuple(range(n_classes)),), per_class_count)
    sp = cfg.split
    table = load_grouping_table(sp.grouping_table) if sp.grouping_table else None
    return group_classes(n_classes, sp.n_splits, sp.strategy, class_semantics=table,
                         groups=sp.groups, seed=sp.seed, per_class_count=per_class_count)


def backbone_specs(cfg: ExperimentConfig, input_shape):
    return build_backbone(cfg.backbone.resolved_blocks(), input_shape[0])


def reference_flops(cfg: ExperimentConfig, n_classes: int, input_shape) -> int:
    """FLOPs of one plain ``N``-way network on the configured backbone."""
    return TreeModel(backbone_specs(cfg, input_shape), [n_classes], input_shape).flops()


def _member_seed(seed: int, member: int) -> int:
    return seed + 1000 * member


@dataclass
class TrainedRun:
    cfg: ExperimentConfig
    spec: SubtaskSpec
    models: list
    histories: list
    budget: int | None
    out_dir: Path | None
    seconds: float

    @property
    def model(self) -> TreeModel:
        return self.models[0]


def train_experiment(cfg: ExperimentConfig, data: LoadedData | None = None,
                     out_dir=None) -> TrainedRun:
    """Train the configured baseline; writes artifacts when ``out_dir`` is set."""
    start = time.perf_counter()
    data = data or load_data(cfg)
    spec = build_spec(cfg, data.n_classes, data.per_class_count)
    bb = backbone_specs(cfg, data.input_shape)
    out = Path(out_dir) if out_dir is not None else None
    events = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
        events = out / "events.jsonl"
        events.unlink(missing_ok=True)
    log_sink = EventLog(events)

    models, histories, budget = [], [], None
    if cfg.baseline == "split_ensemble":
        budget = cfg.train.flops_budget or reference_flops(cfg, data.n_classes, data.input_shape)
        tcfg = replace(cfg.train, flops_budget=budget)
        torch.manual_seed(tcfg.seed)
        model = init_shared(bb, spec, data.input_shape)
        model, history = train(model, spec, data.train, tcfg, event_log=log_sink)
        models.append(model)
        histories.append(history)
        members = [(model, tcfg, history)]
    else:
        n = cfg.n_members if cfg.baseline == "naive_ensemble" else 1
        members = []
        for m in range(n):
            seed = _member_seed(cfg.train.seed, m)
            # no splitting; the budget is the network's own cost so nothing is pruned
            torch.manual_seed(seed)
            model = TreeModel(bb, [data.n_classes], data.input_shape)
            tcfg = replace(cfg.train, seed=seed, mct_threshold=0.0, flops_budget=model.flops())
            model, history = train(model, spec, data.train, tcfg,
                                   loss=CrossEntropyObjective(data.n_classes), event_log=log_sink)
            models.append(model)
            histories.append(history)
            members.append((model, tcfg, history))
    if out is not None:
        for m, (model, tcfg, history) in enumerate(members):
            name = "model.pt" if len(members) == 1 else f"member_{m}.pt"
            save_checkpoint(out / name, model, spec, None, history, tcfg, tcfg.epochs,
                            {"baseline": cfg.baseline, "member": m})
        write_architecture(models[0], out / "architecture")
    return TrainedRun(cfg, spec, models, histories, budget, out, time.perf_counter() - start)


def write_architecture(model: TreeModel, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    js = stem.with_suffix(".json")
    dot = stem.with_suffix(".dot")
    js.write_text(model.to_json(indent=2, sort_keys=True) + "\n")
    dot.write_text(model.to_dot())
    return js, dot


def checkpoint_paths(run_dir) -> list[Path]:
    run_dir = Path(run_dir)
    single = run_dir / "model.pt"
    if single.exists():
        return [single]
    members = sorted(run_dir.glob("member_*.pt"), key=lambda p: int(p.stem.split("_")[1]))
    if not members:
        raise FileNotFoundError(f"no checkpoints found in {run_dir}")
    return members


def load_models(run_dir, spec: SubtaskSpec | None = None) -> list[TreeModel]:
    return [load_checkpoint(p, spec).model for p in checkpoint_paths(run_dir)]


# ------------------------------------------------------------- evaluation --

@torch.no_grad()
def score(models, baseline: str, spec: SubtaskSpec, x: torch.Tensor,
          batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Predicted classes and ID-ness scores (higher = more in-distribution)."""
    preds, scores = [], []
    for m in models:
        m.eval()
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        if baseline == "split_ensemble":
            out = predict(models[0](xb), spec)
            preds.append(out.predicted_class)
            scores.append(out.uncertainty_score)
        else:
            logits = [m(xb)[0] for m in models]
            mean = torch.stack(logits).mean(0)
            preds.append(mean.argmax(-1).numpy())
            scores.append(msp_score(logits))
    return np.concatenate(preds), np.concatenate(scores)


@dataclass
class EvalRow:
    ood_set: str
    report: MetricsReport | None
    error: str | None = None

    def to_dict(self) -> dict:
        d = {"ood_set": self.ood_set}
        d.update(self.report.to_dict() if self.report else {k: None for k in METRIC_COLUMNS})
        d["error"] = self.error
        return d


def evaluate_models(models, cfg: ExperimentConfig, spec: SubtaskSpec,
                    data: LoadedData) -> list[EvalRow]:
    xt, yt = data.test
    pred, id_scores = score(models, cfg.baseline, spec, xt, cfg.eval.batch_size)
    acc = float(np.mean(pred == yt.numpy()))
    if not data.ood:
        return [EvalRow("id", MetricsReport(accuracy=acc))]
    rows = []
    for name, x in data.ood.items():
        if isinstance(x, str):
            rows.append(EvalRow(name, None, x))
            continue
        try:
            _, ood_scores = score(models, cfg.baseline, spec, x, cfg.eval.batch_size)
            rep = ood_metrics(id_scores, ood_scores, cfg.eval.tpr, accuracy=acc)
            if cfg.eval.aupr_positive == "ood":
                rep.aupr = aupr(id_scores, ood_scores, positive="ood")
            rows.append(EvalRow(name, rep))
        except Exception as exc:
            rows.append(EvalRow(name, None, f"{type(exc).__name__}: {exc}"))
    ok = [r.report for r in rows if r.report is not None]
    rows.append(EvalRow("mean", mean_report(ok) if ok else None,
                        None if ok else "no OOD set could be evaluated"))
    return rows


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["ood_set", *METRIC_COLUMNS, "error"])
    for r in rows:
        d = r.to_dict()
        w.writerow([d["ood_set"], *(_fmt(d[k]) for k in METRIC_COLUMNS), d["error"] or ""])
    return buf.getvalue()


def write_report(rows, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    csv_path.write_text(rows_to_csv(rows))
    json_path.write_text(json.dumps([r.to_dict() for r in rows], indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


# --------------------------------------------------------------- commands --

def cmd_train(cfg: ExperimentConfig, out_dir=None) -> TrainedRun:
    out = Path(out_dir) if out_dir else cfg.resolved_output_dir()
    run = train_experiment(cfg, out_dir=out)
    summary = {
        "baseline": cfg.baseline,
        "groups": [list(g) for g in run.spec.groups],
        "flops": [m.flops() for m in run.models],
        "budget": run.budget,
        "splits": sum(len(h.splits) for h in run.histories),
        "prunes": sum(len(h.prunes) for h in run.histories),
        "all_private": all(m.all_private() for m in run.models),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("trained %s in %.1fs -> %s", cfg.baseline, run.seconds, out)
    return run


def cmd_eval(run_dir, cfg: ExperimentConfig | None = None, out_dir=None) -> list[EvalRow]:
    """Evaluate the checkpoints in ``run_dir``; ``cfg`` defaults to the stored config."""
    run_dir = Path(run_dir)
    cfg = cfg or load_config(run_dir / "config.yaml")
    data = load_data(cfg)
    spec = build_spec(cfg, data.n_classes, data.per_class_count)
    models = load_models(run_dir, spec)
    rows = evaluate_models(models, cfg, spec, data)
    write_report(rows, out_dir or run_dir)
    return rows


def _cell_name(assignment: dict, seed) -> str:
    parts = [f"{k.split('.')[-1]}={v}" for k, v in assignment.items()]
    return ",".join(parts + [f"seed={seed}"]).replace("/", "_")


def _run_cell(base_raw: dict, assignment: dict, seed: int, out_dir: str) -> dict:
    record = {"cell": dict(assignment), "seed": seed, "dir": out_dir, "error": None}
    try:
        overrides = [f"{k}={json.dumps(v)}" for k, v in assignment.items()]
        raw = apply_overrides(base_raw, overrides + [f"train.seed={seed}"])
        cfg = parse_config(raw)
        run = cmd_train(cfg, out_dir)
        rows = cmd_eval(out_dir, cfg)
        final = rows[-1].report
        record.update(accuracy=final.accuracy if final else None,
                      auroc=final.auroc if final else None,
                      flops=run.models[0].flops(), splits=len(run.histories[0].splits))
    except Exception as exc:  # the grid keeps going
        log.exception("ablation cell %s seed %s failed", assignment, seed)
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def _grid_cells(axes: dict) -> list[dict]:
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def cmd_ablate(grid: dict, out_dir=None, workers: int = 1) -> list[dict]:
    """Run every grid cell (times every seed) and aggregate accuracy/AUROC.

    ``grid`` holds ``base`` (config mapping or YAML path), ``axes`` (dotted
    config key -> list of values) and optionally ``seeds`` and ``name``.
    """
    unknown = sorted(set(grid) - {"base", "axes", "seeds", "name"})
    if unknown or "axes" not in grid or not isinstance(grid["axes"], dict):
        problems = {k: "unknown key" for k in unknown}
        if not isinstance(grid.get("axes"), dict):
            problems["axes"] = "expected a mapping of dotted key -> values"
        raise ConfigError(problems)
    base = grid.get("base") or {}
    if isinstance(base, (str, Path)):
        base = yaml.safe_load(Path(base).read_text()) or {}
    parse_config(base)  # fail fast on a broken base config
    seeds = list(grid.get("seeds") or [0])
    out = Path(out_dir) if out_dir else \
        ExperimentConfig(name=grid.get("name", "ablation")).resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(base, cell, s, str(out / _cell_name(cell, s)))
            for cell in _grid_cells(grid["axes"]) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        records = [_run_cell(*job) for job in jobs]
    table = aggregate(records)
    (out / "cells.json").write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    keys = list(grid["axes"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*keys, "n_ok", "n_failed", "accuracy_mean", "accuracy_std",
                "auroc_mean", "auroc_std"])
    for row in table:
        w.writerow([*(row["cell"][k] for k in keys), row["n_ok"], row["n_failed"],
                    *(_fmt(row[c]) for c in ("accuracy_mean", "accuracy_std",
                                             "auroc_mean", "auroc_std"))])
    (out / "ablation.csv").write_text(buf.getvalue())
    return table


def aggregate(records) -> list[dict]:
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(json.dumps(r["cell"], sort_keys=True), []).append(r)
    table = []
    for key, rs in groups.items():
        ok = [r for r in rs if r["error"] is None]
        row = {"cell": json.loads(key), "n_ok": len(ok), "n_failed": len(rs) - len(ok)}
        for metric in ("accuracy", "auroc"):
            vals = [r[metric] for r in ok if r.get(metric) is not None]
            row[f"{metric}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{metric}_std"] = float(np.std(vals)) if vals else None
        table.append(row)
    return table


def cmd_export_arch(checkpoint, out_stem=None) -> tuple[Path, Path]:
    checkpoint = Path(checkpoint)
    state = load_checkpoint(checkpoint)
    stem = Path(out_stem) if out_stem else checkpoint.with_name(checkpoint.stem + "_arch")
    return write_architecture(state.model, stem)


def cmd_gen_ood(kind: str, shape, count: int, seed: int, out_path) -> Path:
    x = gen_noise_ood(kind, shape, count, seed)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, x=x)
    return out


def benchmark_config(mode: str = "split_ensemble", seed: int = 0, **train_overrides) -> ExperimentConfig:
    """The desk-scale synthetic benchmark (8 blob classes, 4 subtasks of 2)."""
    cfg = ExperimentConfig(name=f"bench-{mode}-{seed}")
    cfg.split.strategy = "explicit"
    cfg.split.groups = [[0, 1], [2, 3], [4, 5], [6, 7]]
    if mode in ("ood_aware", "one_hot"):
        cfg.train = replace(cfg.train, ood_target_mode=mode)
        mode = "split_ensemble"
    cfg.baseline = mode
    cfg.train = replace(cfg.train, seed=seed, **train_overrides)
    return cfg
