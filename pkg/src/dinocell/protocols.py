"""Experiment orchestration: embedding export, head cross-validation and protocols.

Every protocol reads a split dataset (see ``data.split_dataset``), writes
``report.json`` (resolved config, seeds, per-run rows) and an aggregate
``<protocol>.csv`` into its output directory, and returns the report dict.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels as K
from .backbone import embed_images, init_backbone, preset
from .cellcrop import extract_dataset
from .channel_adapt import (
    CHANNEL_LAYOUTS,
    ChannelMap,
    channel_map_apply,
    enumerate_maps,
    natural_map,
    parse_map,
    replicate_embed,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetManifest, check_split, load_images, normalize_planes, subsample
from .errors import ConfigError, ContractError, DataError, ResolutionError
from .head_classifier import EmbeddingSet, HeadConfig, train_head
from .knn_eval import KnnConfig, loo_eval
from .ssl_dino import DinoConfig, ssl_train

PROTOCOLS = ("zero-shot", "finetune", "scaling", "channel-ablation", "single-cell")
DEFAULT_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class ExperimentConfig:
    protocol: str
    data: str
    backbone: str | None = None  # checkpoint dir; None = freshly initialized preset
    preset: str = "vit-tiny/4"
    layout: str | None = None  # slot layout name of the backbone input
    adapter: str = "natural"  # natural | replication | explicit map spec
    ssl: dict = field(default_factory=dict)
    head: dict = field(default_factory=dict)
    knn: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)
    fractions: tuple = DEFAULT_FRACTIONS
    ablation_finetune: bool = False
    n_folds: int = 5
    min_grade: int = 1
    seed: int = 0

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.layout is not None and self.layout not in CHANNEL_LAYOUTS:
            raise ConfigError(f"unknown layout {self.layout!r}")
        allowed = {f.name for f in fields(HeadConfig)} - {"in_dim", "n_classes"}
        if set(self.head) - allowed:
            raise ConfigError(f"unknown head options {sorted(set(self.head) - allowed)}")
        KnnConfig(**self.knn)

    def to_dict(self):
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown experiment keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        p = Path(path)
        if not p.exists():
            raise ResolutionError(str(p), "experiment config")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None


# ----------------------------------------------------------------- helpers


def seeds_for(seed, names):
    """Named child seeds derived from one root seed."""
    kids = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(k.generate_state(1)[0]) for n, k in zip(names, kids)}


def load_backbone(cfg: ExperimentConfig, n_channels):
    if cfg.backbone is None:
        # a named layout fixes the slot count of a fresh backbone
        if cfg.layout is not None:
            n_channels = len(CHANNEL_LAYOUTS[cfg.layout])
        return init_backbone(preset(cfg.preset, n_channels), cfg.seed)
    return load_checkpoint(cfg.backbone)


def resolve_adapter(spec, manifest_name, channels, backbone, layout=None):
    """``"replication"`` or a ChannelMap placing ``channels`` into the backbone's slots."""
    slots = backbone.config.input_channels
    if spec == "replication":
        return "replication"
    if isinstance(spec, ChannelMap):
        cmap = spec
    elif spec == "natural":
        if layout is None:
            if len(channels) != slots:
                raise ConfigError(
                    f"natural adapter: data has {len(channels)} channels, backbone {slots} slots; "
                    "name the backbone layout")
            cmap = ChannelMap({c: i for i, c in enumerate(channels)}, slots)
        else:
            src = manifest_name if manifest_name in CHANNEL_LAYOUTS else None
            if src is not None:
                cmap = natural_map(src, layout)
            else:
                tgt = CHANNEL_LAYOUTS[layout]
                missing = [c for c in channels if c not in tgt]
                if missing:
                    raise ConfigError(f"channels {missing} have no slot in layout {layout!r}")
                cmap = ChannelMap({c: tgt.index(c) for c in channels}, len(tgt))
    else:
        cmap = parse_map(spec, slots, channels)
    if cmap.target_slots != slots:
        raise ConfigError(f"adapter fills {cmap.target_slots} slots, backbone has {slots}")
    return cmap


def fit_size(images, size):
    if images.shape[-1] == size and images.shape[-2] == size:
        return images
    return np.stack([K.resize_bilinear(np.ascontiguousarray(x), size, size) for x in images])


def export_embeddings(backbone, images, channels, adapter, batch_size=64):
    """Embedding matrix for an image stack via a ChannelMap or channel replication."""
    images = fit_size(np.asarray(images, dtype=np.float32), backbone.config.image_size)
    if adapter == "replication":
        return replicate_embed(backbone, images, batch_size)
    if not isinstance(adapter, ChannelMap):
        raise ConfigError(f"unsupported adapter {adapter!r}")
    if adapter.target_slots != backbone.config.input_channels:
        raise ConfigError(
            f"adapter fills {adapter.target_slots} slots, backbone has {backbone.config.input_channels}")
    return embed_images(backbone, channel_map_apply(images, adapter, channels), batch_size)


def embedding_set(manifest, matrix, min_grade=1, records=None):
    records = manifest.samples if records is None else records
    return EmbeddingSet(
        matrix, [r.id for r in records], manifest.label_matrix(min_grade, records),
        list(manifest.classes))


def export_embedding_set(checkpoint, data_root, adapter="natural", out=None, layout=None,
                         min_grade=1):
    manifest = DatasetManifest.load(data_root)
    backbone = load_checkpoint(checkpoint)
    cmap = resolve_adapter(adapter, manifest.name, manifest.channels, backbone, layout)
    emb = export_embeddings(backbone, load_images(data_root, manifest), manifest.channels, cmap)
    es = embedding_set(manifest, emb, min_grade)
    if out is not None:
        es.save(out)
    return es


def assert_no_leakage(used_ids, test_ids, what):
    leak = set(used_ids) & set(test_ids)
    if leak:
        raise ContractError(f"{len(leak)} test samples reached {what}: {sorted(leak)[:5]}")


def _mean_sd(values):
    vals = [float(v) for v in values]
    sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return float(np.mean(vals)), sd


def head_cv(es, manifest, head_opts, seed, n_folds=5, train_ids=None):
    """Cross-validated head training on the train split; test rows are scored only.

    Returns one row with per-fold validation and test macro F1, their mean
    and sample standard deviation, and the test macro F1 of a head refit on
    the full train split.
    """
    by_id = {s.id: s for s in manifest.samples}
    train_ids = [i for i in es.ids if by_id[i].split == "train"] if train_ids is None else train_ids
    test_ids = [i for i in es.ids if by_id[i].split == "test"]
    if not test_ids:
        raise DataError("dataset has no test split; run split first")
    test = es.subset_ids(test_ids, split="test")
    fold_seeds = seeds_for(seed, [f"fold{f}" for f in range(n_folds)])
    hcfg = HeadConfig(in_dim=es.dim, n_classes=es.labels.shape[1], **head_opts)
    val_f1, test_f1 = [], []
    for f in range(n_folds):
        tr = [i for i in train_ids if by_id[i].fold != f]
        va = [i for i in train_ids if by_id[i].fold == f]
        assert_no_leakage(tr + va, test_ids, "head training")
        res = train_head(es.subset_ids(tr, "train"), es.subset_ids(va, "val") if va else None,
                         hcfg, fold_seeds[f"fold{f}"])
        val_f1.append(res.trace[-1].get("val_macro_f1", float("nan")) if res.trace else
                      res.evaluate(es.subset_ids(va, "val")).macro_f1)
        test_f1.append(res.evaluate(test).macro_f1)
    # second reading of the test score: one head refit on the whole train split
    full = train_head(es.subset_ids(train_ids, "train"), None, hcfg, seeds_for(seed, ["full"])["full"])
    vm, vs = _mean_sd(val_f1)
    tm, ts = _mean_sd(test_f1)
    return {"val_macro_f1": vm, "val_sd": vs, "test_macro_f1": tm, "test_sd": ts,
            "test_full_macro_f1": full.evaluate(test).macro_f1,
            "fold_val": val_f1, "fold_test": test_f1, "fold_seeds": fold_seeds}


# ----------------------------------------------------------------- protocols


class _Run:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = Path(out)
        self.root = Path(cfg.data)
        self.manifest = DatasetManifest.load(self.root)
        if not any(s.split == "test" for s in self.manifest.samples):
            raise DataError(f"{self.root}: dataset has no split tags; run split first")
        check_split(self.manifest, cfg.n_folds)
        self.labeled = [s for s in self.manifest.samples if s.split is not None]
        self.seeds = seeds_for(cfg.seed, ["init", "ssl", "head", "subsample"])
        self._images = None

    @property
    def images(self):
        if self._images is None:
            self._images = load_images(self.root, self.manifest, self.labeled)
        return self._images

    def ids(self, split):
        return [s.id for s in self.labeled if s.split == split]

    def backbone(self):
        return load_backbone(self.cfg, len(self.manifest.channels))

    def adapter(self, backbone, spec=None):
        return resolve_adapter(spec or self.cfg.adapter, self.manifest.name, self.manifest.channels,
                               backbone, self.cfg.layout)

    def finetune(self, backbone, cmap, train_ids, seed):
        assert_no_leakage(train_ids, self.ids("test"), "SSL fine-tuning")
        pos = {s.id: i for i, s in enumerate(self.labeled)}
        imgs = self.images[[pos[i] for i in train_ids]]
        dcfg = DinoConfig.from_dict({"epochs": 100, **self.cfg.ssl, "backbone": backbone.config.to_dict()})
        if cmap == "replication":
            raise ConfigError("fine-tuning needs a channel map adapter")
        res = ssl_train(imgs, dcfg, init=backbone, adapter=cmap, channels=self.manifest.channels,
                        seed=seed, ids=train_ids)
        return res.teacher, res.trace

    def evaluate(self, backbone, cmap, train_ids=None):
        emb = export_embeddings(backbone, self.images, self.manifest.channels, cmap)
        es = embedding_set(self.manifest, emb, self.cfg.min_grade, self.labeled)
        return head_cv(es, self.manifest, self.cfg.head, self.seeds["head"], self.cfg.n_folds,
                       train_ids)


def _zero_shot(run):
    bb = run.backbone()
    cmap = run.adapter(bb)
    row = run.evaluate(bb, cmap)
    return [{"adapter": cmap if cmap == "replication" else cmap.label(run.manifest.channels), **row}]


def _finetune(run):
    bb = run.backbone()
    cmap = run.adapter(bb)
    ft, trace = run.finetune(bb, cmap, run.ids("train"), run.seeds["ssl"])
    if run.out:
        save_checkpoint(ft, run.out / "finetuned")
        _write_trace(trace, run.out / "ssl_trace.csv")
    return [{"adapter": cmap.label(run.manifest.channels), **run.evaluate(ft, cmap)}]


def _scaling(run):
    bb = run.backbone()
    cmap = run.adapter(bb)
    train = [s for s in run.labeled if s.split == "train"]
    rows = []
    for frac in run.cfg.fractions:
        sub = [s.id for s in subsample(train, frac, run.seeds["subsample"])]
        ft, _ = run.finetune(bb, cmap, sub, run.seeds["ssl"])
        rows.append({"fraction": frac, "n_train": len(sub), **run.evaluate(ft, cmap, sub)})
    return rows


def _channel_ablation(run):
    bb = run.backbone()
    chans = run.manifest.channels
    slots = bb.config.input_channels
    natural = None
    try:
        natural = run.adapter(bb, "natural")
    except ConfigError:
        pass
    rows = []
    for cmap in enumerate_maps(len(chans), slots, chans):
        model = bb
        if run.cfg.ablation_finetune:
            model, _ = run.finetune(bb, cmap, run.ids("train"), run.seeds["ssl"])
        rows.append({"map": cmap.label(chans), "mapping": cmap.as_dict(),
                     "natural": natural is not None and cmap.as_dict() == natural.as_dict(),
                     **run.evaluate(model, cmap)})
    return rows


def _single_cell(run):
    bb = run.backbone()
    opts = {"crop_size": 48, "zoom": True, "percentile": 99.7, "min_grade": run.cfg.min_grade,
            **run.cfg.cells}
    crops = extract_dataset(run.root, run.manifest, run.out / "cells", opts["crop_size"],
                            opts["zoom"], opts["percentile"], records=run.labeled)
    col = {c: i for i, c in enumerate(run.manifest.classes)}
    y = np.zeros((len(crops), len(col)), dtype=np.int8)
    for r, c in enumerate(crops):
        for name, grade in c.annotations.items():
            if grade >= opts["min_grade"]:
                y[r, col[name]] = 1
    keep = y.any(axis=1)
    if not keep.any():
        raise DataError("no single-cell crop carries a label at the requested grade")
    imgs = np.stack([normalize_planes(c.planes) for c, k in zip(crops, keep) if k])
    cmap = run.adapter(bb)
    emb = export_embeddings(bb, imgs, run.manifest.channels, cmap)
    res = loo_eval(emb, y[keep], KnnConfig(**run.cfg.knn), list(run.manifest.classes))
    return [{"k": k, "macro_f1": r.macro_f1, "per_class_f1": r.f1, "n_cells": int(keep.sum())}
            for k, r in sorted(res.reports.items())]


_DISPATCH = {
    "zero-shot": _zero_shot,
    "finetune": _finetune,
    "scaling": _scaling,
    "channel-ablation": _channel_ablation,
    "single-cell": _single_cell,
}


def _write_trace(trace, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "loss", "lr", "lambda"])
        w.writeheader()
        for row in trace:
            w.writerow({k: row[k] for k in w.fieldnames})


def _flat(row):
    return {k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in row.items()}


def run_protocol(cfg: ExperimentConfig, out):
    """Execute ``cfg.protocol`` and write its report bundle under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    rows = _DISPATCH[cfg.protocol](run)
    report = {"protocol": cfg.protocol, "config": cfg.to_dict(), "seeds": run.seeds, "rows": rows}
    (out / "report.json").write_text(json.dumps(report, indent=1, default=_json_default))
    with open(out / f"{cfg.protocol}.csv", "w", newline="") as fh:
        keys = list(dict.fromkeys(k for r in rows for k in r))
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(_flat(r))
    return report


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


__all__ = [
    "PROTOCOLS", "ExperimentConfig", "assert_no_leakage", "export_embedding_set",
    "export_embeddings", "head_cv", "resolve_adapter", "run_protocol", "seeds_for",
]
