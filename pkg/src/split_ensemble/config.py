"""Declarative experiment configuration (YAML) with validation."""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .task_split import TARGET_MODES
from .trainer import TrainConfig

OUTPUT_ENV = "SPLIT_ENSEMBLE_OUTPUT"
BASELINES = ("single_model", "naive_ensemble", "split_ensemble")
DATASET_KINDS = ("blobs", "npz", "image_dir", "cifar")
OOD_KINDS = ("gaussian", "uniform", "blob_holdout", "npz", "image_dir")
STRATEGIES = ("explicit", "random", "semantic")
PRESETS = ("desk6", "resnet18")

DESK6_BLOCKS = [
    {"kind": "conv", "out": 8}, {"kind": "pool"},
    {"kind": "conv", "out": 16}, {"kind": "conv", "out": 16}, {"kind": "pool"},
    {"kind": "conv", "out": 32}, {"kind": "conv", "out": 32}, {"kind": "conv", "out": 32},
]


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` maps dotted keys to messages."""

    def __init__(self, problems: dict[str, str]):
        self.problems = dict(problems)
        lines = "\n".join(f"  {k}: {v}" for k, v in sorted(self.problems.items()))
        super().__init__(f"invalid config ({len(self.problems)} problem(s)):\n{lines}")


@dataclass
class BlobsConfig:
    n_classes: int = 8
    per_class: int = 500
    size: int = 16
    test_per_class: int = 200
    holdout_classes: int = 1
    ood_count: int = 1000
    bumps: int = 3
    jitter: float = 1.0
    noise: float = 0.2
    seed: int = 0


@dataclass
class OODSetConfig:
    name: str
    kind: str
    path: str | None = None
    count: int = 1000
    seed: int = 0


@dataclass
class DatasetConfig:
    kind: str = "blobs"
    path: str | None = None
    test_path: str | None = None
    blobs: BlobsConfig = field(default_factory=BlobsConfig)
    ood: list[OODSetConfig] = field(default_factory=lambda: [OODSetConfig("blob_holdout", "blob_holdout")])


@dataclass
class BackboneConfig:
    preset: str | None = "desk6"
    width: int = 64
    blocks: list[dict] | None = None

    def resolved_blocks(self) -> list[dict]:
        if self.blocks is not None:
            return copy.deepcopy(self.blocks)
        if self.preset == "resnet18":
            from .tree_model import resnet18_blocks
            return resnet18_blocks(self.width)
        return copy.deepcopy(DESK6_BLOCKS)


@dataclass
class SplitConfig:
    n_splits: int = 4
    strategy: str = "random"
    groups: list[list[int]] | None = None
    grouping_table: str | None = None
    seed: int = 0


@dataclass
class EvalConfig:
    tpr: float = 0.95
    aupr_positive: str = "id"
    batch_size: int = 1024


def _train_defaults() -> TrainConfig:
    return TrainConfig(epochs=30, warmup_epochs=3, lr=0.05, batch_size=128, prune_interval=3)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    baseline: str = "split_ensemble"
    n_members: int = 4
    output_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=_train_defaults)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return parse_config(d or {})

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ENV, "runs")) / self.name


# ---------------------------------------------------------------- parsing --

def _build(cls, data, prefix, problems):
    """Instantiate a flat dataclass from ``data``, recording bad keys."""
    if not isinstance(data, dict):
        problems[prefix.rstrip(".") or "<root>"] = "expected a mapping"
        return None
    names = {f.name for f in fields(cls)}
    for k in sorted(set(data) - names):
        problems[prefix + str(k)] = "unknown key"
    kwargs = {k: v for k, v in data.items() if k in names}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        problems[prefix.rstrip(".")] = str(exc)
    except ValueError as exc:
        for part in str(exc).split("; "):
            key = part.split(" ", 1)[0]
            problems[prefix + key if key in names else prefix.rstrip(".")] = part
    return None


def _check_int(value, key, problems, minimum=None):
    if not isinstance(value, int) or isinstance(value, bool):
        problems[key] = f"expected an integer, got {value!r}"
    elif minimum is not None and value < minimum:
        problems[key] = f"must be >= {minimum}"


def parse_config(d: dict) -> ExperimentConfig:
    """Validate a raw mapping; raises ``ConfigError`` listing every problem."""
    problems: dict[str, str] = {}
    d = copy.deepcopy(d)
    if not isinstance(d, dict):
        raise ConfigError({"<root>": "expected a mapping"})
    top = {f.name for f in fields(ExperimentConfig)}
    for k in sorted(set(d) - top):
        problems[str(k)] = "unknown key"

    ds_raw = d.get("dataset", {})
    blobs = ood = None
    if isinstance(ds_raw, dict):
        blobs = _build(BlobsConfig, ds_raw.pop("blobs", {}), "dataset.blobs.", problems)
        ood_raw = ds_raw.pop("ood", None)
        if ood_raw is None:
            ood = DatasetConfig().ood
        elif isinstance(ood_raw, list):
            ood = [_build(OODSetConfig, o, f"dataset.ood.{i}.", problems)
                   for i, o in enumerate(ood_raw)]
        else:
            problems["dataset.ood"] = "expected a list"
    dataset = _build(DatasetConfig, ds_raw, "dataset.", problems)
    if dataset is not None:
        dataset.blobs, dataset.ood = blobs, ood

    backbone = _build(BackboneConfig, d.get("backbone", {}), "backbone.", problems)
    split = _build(SplitConfig, d.get("split", {}), "split.", problems)
    evalc = _build(EvalConfig, d.get("eval", {}), "eval.", problems)
    train_raw = d.get("train", {})
    if isinstance(train_raw, dict):
        train_raw = {**asdict(_train_defaults()), **train_raw}
    train = _build(TrainConfig, train_raw, "train.", problems)

    scalars = {k: d[k] for k in ("name", "baseline", "n_members", "output_dir") if k in d}
    cfg = ExperimentConfig(**scalars)
    for name, val in (("dataset", dataset), ("backbone", backbone), ("split", split),
                      ("train", train), ("eval", evalc)):
        if val is not None:
            setattr(cfg, name, val)
    problems.update(_semantic_checks(cfg, problems))
    if problems:
        raise ConfigError(problems)
    return cfg


def _semantic_checks(cfg: ExperimentConfig, already: dict) -> dict[str, str]:
    p: dict[str, str] = {}
    if not isinstance(cfg.name, str) or not cfg.name:
        p["name"] = "must be a nonempty string"
    if cfg.baseline not in BASELINES:
        p["baseline"] = f"must be one of {BASELINES}"
    _check_int(cfg.n_members, "n_members", p, 1)
    ds = cfg.dataset
    if "dataset.kind" not in already and ds.kind not in DATASET_KINDS:
        p["dataset.kind"] = f"must be one of {DATASET_KINDS}"
    elif ds.kind != "blobs":
        if not ds.path:
            p["dataset.path"] = f"required for dataset kind {ds.kind!r}"
        elif not Path(ds.path).exists():
            p["dataset.path"] = f"does not exist: {ds.path}"
        if ds.test_path and not Path(ds.test_path).exists():
            p["dataset.test_path"] = f"does not exist: {ds.test_path}"
    if isinstance(ds.blobs, BlobsConfig):
        b = ds.blobs
        for k in ("n_classes", "per_class", "size", "test_per_class", "bumps"):
            _check_int(getattr(b, k), f"dataset.blobs.{k}", p, 1)
        _check_int(b.holdout_classes, "dataset.blobs.holdout_classes", p, 0)
    names = set()
    for i, o in enumerate(ds.ood or []):
        if o is None:
            continue
        key = f"dataset.ood.{i}"
        if o.name in names:
            p[f"{key}.name"] = f"duplicate OOD set name {o.name!r}"
        names.add(o.name)
        if o.kind not in OOD_KINDS:
            p[f"{key}.kind"] = f"must be one of {OOD_KINDS}"
        if o.kind in ("npz", "image_dir") and not o.path:
            p[f"{key}.path"] = "required for file-backed OOD sets"
        if o.kind == "blob_holdout" and ds.kind != "blobs":
            p[f"{key}.kind"] = "blob_holdout needs the blobs dataset"
        _check_int(o.count, f"{key}.count", p, 1)
    bb = cfg.backbone
    if isinstance(bb, BackboneConfig):
        if bb.blocks is None and bb.preset not in PRESETS:
            p["backbone.preset"] = f"must be one of {PRESETS} (or give blocks)"
        if bb.blocks is not None and (not isinstance(bb.blocks, list) or not all(
                isinstance(b, dict) and "kind" in b for b in bb.blocks)):
            p["backbone.blocks"] = "expected a list of mappings with a 'kind'"
    sp = cfg.split
    if isinstance(sp, SplitConfig):
        _check_int(sp.n_splits, "split.n_splits", p, 1)
        if cfg.baseline == "split_ensemble" and isinstance(sp.n_splits, int) and sp.n_splits < 2:
            p["split.n_splits"] = "split_ensemble needs at least 2 subtasks"
        if sp.strategy not in STRATEGIES:
            p["split.strategy"] = f"must be one of {STRATEGIES}"
        if sp.strategy == "explicit" and not sp.groups:
            p["split.groups"] = "required for the explicit strategy"
        if sp.strategy == "semantic" and not sp.grouping_table:
            p["split.grouping_table"] = "required for the semantic strategy"
        if sp.grouping_table and not Path(sp.grouping_table).exists():
            p["split.grouping_table"] = f"does not exist: {sp.grouping_table}"
    ev = cfg.eval
    if isinstance(ev, EvalConfig):
        if not 0.0 < ev.tpr <= 1.0:
            p["eval.tpr"] = "must lie in (0, 1]"
        if ev.aupr_positive not in ("id", "ood"):
            p["eval.aupr_positive"] = "must be 'id' or 'ood'"
    if isinstance(cfg.train, TrainConfig) and cfg.train.ood_target_mode not in TARGET_MODES:
        p["train.ood_target_mode"] = f"must be one of {TARGET_MODES}"
    return p


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError({"<file>": f"cannot read {path}: {exc}"}) from exc
    except yaml.YAMLError as exc:
        raise ConfigError({"<file>": f"{path} is not valid YAML: {exc}"}) from exc
    return parse_config(raw or {})


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_yaml())
    return path


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as YAML scalars."""
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError({item: "override must look like key=value"})
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        last = parts[-1]
        parsed = yaml.safe_load(value)
        if isinstance(node, list):
            node[int(last)] = parsed
        else:
            node[last] = parsed
    return raw
