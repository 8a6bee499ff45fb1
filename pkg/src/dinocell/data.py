"""Multi-channel image samples, dataset manifests and on-disk layout.

A dataset directory contains ``manifest.json`` and, per sample,
``fov/<id>.ctf`` (u16, C x H x W), ``fov/<id>.json`` (sidecar with channels
and labels) and optionally ``masks/<id>.ctf`` (u16 instance ids).
"""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ctf
from .errors import ConfigError, DataError, ResolutionError

U16_MAX = 65535.0


@dataclass
class MultiChannelImage:
    channels: tuple
    planes: np.ndarray
    mask: np.ndarray | None = None
    annotations: dict = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.planes.ndim != 3 or self.planes.shape[0] != len(self.channels):
            raise DataError(
                f"planes {self.planes.shape} do not match channels {self.channels}"
            )
        if self.mask is not None and self.mask.shape != self.planes.shape[1:]:
            raise DataError(f"mask {self.mask.shape} vs image {self.planes.shape[1:]}")

    @property
    def shape(self):
        return self.planes.shape

    def plane(self, name):
        try:
            return self.planes[self.channels.index(name)]
        except ValueError:
            raise DataError(f"image {self.id!r} has no channel {name!r}") from None


def normalize_planes(planes, q=99.9):
    """Scale each channel to [0, 1] by its ``q``-th percentile; zeros stay zero."""
    planes = np.asarray(planes, dtype=np.float32)
    out = np.empty_like(planes)
    for c in range(planes.shape[0]):
        hi = float(np.percentile(planes[c], q))
        out[c] = np.clip(planes[c] / hi, 0.0, 1.0) if hi > 0 else 0.0
    return out


@dataclass
class SampleRecord:
    id: str
    image: str
    labels: dict
    mask: str | None = None
    split: str | None = None
    fold: int | None = None


@dataclass
class DatasetManifest:
    name: str
    channels: list
    classes: list
    samples: list
    seed: int | None = None
    generator: dict | None = None

    @property
    def ids(self):
        return [s.id for s in self.samples]

    def label_matrix(self, min_grade=1, samples=None):
        samples = self.samples if samples is None else samples
        col = {c: i for i, c in enumerate(self.classes)}
        y = np.zeros((len(samples), len(self.classes)), dtype=np.int8)
        for r, s in enumerate(samples):
            for cls, grade in s.labels.items():
                if grade >= min_grade:
                    y[r, col[cls]] = 1
        return y

    def grade_matrix(self):
        col = {c: i for i, c in enumerate(self.classes)}
        g = np.zeros((len(self.samples), len(self.classes)), dtype=np.int8)
        for r, s in enumerate(self.samples):
            for cls, grade in s.labels.items():
                g[r, col[cls]] = grade
        return g

    def select(self, split=None, folds=None, exclude_folds=None):
        out = []
        for s in self.samples:
            if split is not None and s.split != split:
                continue
            if folds is not None and s.fold not in folds:
                continue
            if exclude_folds is not None and s.fold in exclude_folds:
                continue
            out.append(s)
        return out

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["samples"] = [SampleRecord(**s) for s in d["samples"]]
        return cls(**d)

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "manifest.json").write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, root):
        p = Path(root) / "manifest.json"
        if not p.exists():
            raise ResolutionError(str(p), "dataset manifest")
        return cls.from_dict(json.loads(p.read_text()))

    def validate(self):
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in manifest")
        known = set(self.classes)
        for s in self.samples:
            bad = set(s.labels) - known
            if bad:
                raise DataError(f"sample {s.id}: unknown classes {sorted(bad)}")
            if any(not 1 <= g <= 3 for g in s.labels.values()):
                raise DataError(f"sample {s.id}: grades must lie in 1..3")
        return self


def write_sample(root, image: MultiChannelImage, record: SampleRecord, raw_u16):
    root = Path(root)
    (root / "fov").mkdir(parents=True, exist_ok=True)
    ctf.save(root / record.image, raw_u16)
    side = {"id": record.id, "channels": list(image.channels), "labels": record.labels}
    (root / record.image).with_suffix(".json").write_text(json.dumps(side))
    if record.mask is not None and image.mask is not None:
        (root / "masks").mkdir(parents=True, exist_ok=True)
        ctf.save(root / record.mask, image.mask.astype(np.uint16))


def read_sample(root, manifest, record, normalize=True):
    root = Path(root)
    raw = ctf.load(root / record.image)
    planes = normalize_planes(raw) if normalize else raw.astype(np.float32)
    mask = ctf.load(root / record.mask).astype(np.int32) if record.mask else None
    return MultiChannelImage(manifest.channels, planes, mask, dict(record.labels), record.id)


def load_images(root, manifest, records=None, normalize=True):
    """Normalized float32 stack ``(n, C, H, W)`` in record order."""
    records = manifest.samples if records is None else records
    if not records:
        raise DataError("no samples selected")
    return np.stack([read_sample(root, manifest, r, normalize).planes for r in records])


# ------------------------------------------------------------------- splits


def _rarest_label(samples, counts):
    keys = []
    for s in samples:
        if not s.labels:
            keys.append(None)
        else:
            keys.append(min(s.labels, key=lambda c: (counts[c], c)))
    return keys


def split_dataset(manifest, seed=0, test_frac=0.1, n_folds=5):
    """Stratified train/test split plus ``n_folds`` disjoint folds over train.

    Unlabeled samples get ``split=None``. Stratification groups samples by
    their globally rarest label; classes with fewer than ``n_folds``
    positives are not stratified (a warning is issued).
    """
    labeled = [s for s in manifest.samples if s.labels]
    if len(labeled) < 10:
        raise DataError(f"need at least 10 labeled samples, got {len(labeled)}")
    counts = Counter(c for s in labeled for c in s.labels)
    keys = _rarest_label(labeled, counts)
    thin = sorted(c for c, n in counts.items() if n < n_folds)
    if thin:
        warnings.warn(f"classes with < {n_folds} positives are not stratified: {thin}")
        keys = ["__pool__" if k in thin else k for k in keys]
    rng = np.random.default_rng(seed)
    groups = {}
    for s, k in zip(labeled, keys):
        groups.setdefault(k, []).append(s)
    names = sorted(groups)
    for k in names:
        perm = rng.permutation(len(groups[k]))
        groups[k] = [groups[k][i] for i in perm]
    n_test = int(round(test_frac * len(labeled)))
    # largest-remainder allocation of the test budget across strata
    quota = {k: test_frac * len(groups[k]) for k in names}
    alloc = {k: int(math.floor(q)) for k, q in quota.items()}
    rest = n_test - sum(alloc.values())
    for k in sorted(names, key=lambda k: (-(quota[k] - alloc[k]), k))[:max(rest, 0)]:
        alloc[k] += 1
    for s in manifest.samples:
        s.split, s.fold = None, None
    train_order = []
    for k in names:
        g = groups[k]
        for s in g[:alloc[k]]:
            s.split = "test"
        for s in g[alloc[k]:]:
            s.split = "train"
            train_order.append(s)
    for i, s in enumerate(train_order):
        s.fold = i % n_folds
    return manifest


def check_split(manifest, n_folds=5):
    train = manifest.select("train")
    folds = [set(s.id for s in train if s.fold == f) for f in range(n_folds)]
    union = set().union(*folds)
    if union != {s.id for s in train}:
        raise DataError("folds do not cover the training split")
    if sum(len(f) for f in folds) != len(union):
        raise DataError("folds overlap")
    return True


def subsample(records, fraction, seed):
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    n = max(1, int(round(fraction * len(records))))
    idx = np.sort(np.random.default_rng(seed).choice(len(records), size=n, replace=False))
    return [records[i] for i in idx]
