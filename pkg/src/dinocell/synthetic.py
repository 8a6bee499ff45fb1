"""Seeded synthetic fluorescence fields of view.

Two rendering styles stand in for the real corpora:

``target``  two channels ``(protein, nucleus)``, soft-edged cells, like a
            small task dataset.
``source``  four channels ``(microtubules, protein, nucleus, er)`` with
            filament and reticulum reference stains, larger sharper cells
            and different noise, like a large pretraining corpus.

The protein channel pattern encodes the class: ``nuclear`` (fills the
nucleus), ``cytoplasmic`` (fills the soma around the nucleus) or
``punctate`` (small foci scattered over the whole cell). The source style
also draws ``membrane`` (a rim at the cell edge) and ``nucleoli`` (a few
bright spots inside the nucleus), so its protein channel is the most varied
plane while its reference stains stay smooth and stereotyped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DatasetManifest, MultiChannelImage, SampleRecord, U16_MAX, write_sample
from .errors import ConfigError

CLASSES = ("nuclear", "cytoplasmic", "punctate", "membrane", "nucleoli")
STYLE_CLASSES = {"target": CLASSES[:3], "source": CLASSES}
STYLE_CHANNELS = {
    "target": ("protein", "nucleus"),
    "source": ("microtubules", "protein", "nucleus", "er"),
}


@dataclass
class SyntheticConfig:
    name: str = "synthetic-target"
    style: str = "target"
    n_samples: int = 600
    image_size: int = 96
    classes: list | None = None  # None: the style's default class list
    cells_per_image: tuple = (3, 6)
    multi_label_frac: float = 0.0
    write_masks: bool = True

    def __post_init__(self):
        self.cells_per_image = tuple(self.cells_per_image)
        if self.style not in STYLE_CHANNELS:
            raise ConfigError(f"unknown style {self.style!r}")
        if self.classes is None:
            self.classes = list(STYLE_CLASSES[self.style])
        if self.n_samples < 1 or self.image_size < 32:
            raise ConfigError("need n_samples >= 1 and image_size >= 32")
        bad = set(self.classes) - set(CLASSES)
        if bad or not self.classes:
            raise ConfigError(f"unknown classes {sorted(bad)}; choose from {CLASSES}")
        lo, hi = self.cells_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad cells_per_image {self.cells_per_image}")
        if not 0 <= self.multi_label_frac <= 1:
            raise ConfigError("multi_label_frac must lie in [0, 1]")

    @property
    def channels(self):
        return STYLE_CHANNELS[self.style]

    def to_dict(self):
        return asdict(self)


def _ellipse_radius(yy, xx, cy, cx, a, b, theta):
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _soft(r, sharp):
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * sharp, -50, 50)))


def _blur(img, sigma):
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(img, sigma)


def _render_cell(rng, size, yy, xx, classes, style):
    big = style == "source"
    a = rng.uniform(11, 15) if big else rng.uniform(9, 13)
    b = a * rng.uniform(0.75, 1.0)
    cy, cx = rng.uniform(a, size - a, size=2)
    theta = rng.uniform(0, np.pi)
    sharp = 14.0 if big else 7.0
    r_soma = _ellipse_radius(yy, xx, cy, cx, a, b, theta)
    soma = _soft(r_soma, sharp)
    na, nb = a * rng.uniform(0.42, 0.55), b * rng.uniform(0.42, 0.55)
    ny = cy + rng.uniform(-0.12, 0.12) * a
    nx = cx + rng.uniform(-0.12, 0.12) * a
    r_nuc = _ellipse_radius(yy, xx, ny, nx, na, nb, theta + rng.uniform(-0.3, 0.3))
    nucleus = _soft(r_nuc, sharp * 1.5)
    texture = 1.0 + 0.15 * _blur(rng.standard_normal((size, size)), 1.0)
    nuc_plane = nucleus * rng.uniform(0.6, 1.0) * texture

    protein = np.zeros((size, size))
    for cls in classes:
        amp = rng.uniform(0.6, 0.95)
        if cls == "nuclear":
            protein += amp * nucleus + 0.05 * soma
        elif cls == "cytoplasmic":
            protein += amp * soma * (1.0 - nucleus) + 0.04 * nucleus
        elif cls == "punctate":
            spots = np.zeros((size, size))
            n_spots = rng.integers(8, 17)
            for _ in range(n_spots):
                rr = np.sqrt(rng.uniform(0, 0.85))
                ang = rng.uniform(0, 2 * np.pi)
                py = cy + rr * a * np.sin(ang)
                px = cx + rr * b * np.cos(ang)
                sig = rng.uniform(0.9, 1.5)
                spots += rng.uniform(0.6, 1.0) * np.exp(
                    -((yy - py) ** 2 + (xx - px) ** 2) / (2 * sig * sig))
            protein += np.minimum(spots, 1.0) + 0.06 * soma
        elif cls == "membrane":
            protein += amp * np.exp(-((r_soma - 0.92) ** 2) / 0.004) + 0.04 * soma
        elif cls == "nucleoli":
            spots = np.zeros((size, size))
            for _ in range(rng.integers(1, 4)):
                rr = np.sqrt(rng.uniform(0, 0.4))
                ang = rng.uniform(0, 2 * np.pi)
                py, px = ny + rr * na * np.sin(ang), nx + rr * nb * np.cos(ang)
                spots += np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * 1.6 ** 2))
            protein += amp * np.minimum(spots, 1.0) + 0.1 * nucleus
    protein *= texture

    planes = {"protein": protein, "nucleus": nuc_plane}
    if style == "source":
        # reference stains: smooth, the same look in every cell
        planes["microtubules"] = soma * (0.35 + 0.4 * np.clip(1.0 - r_soma, 0.0, 1.0))
        planes["er"] = np.exp(-((r_nuc - 1.3) ** 2) / 0.3) * soma * 0.8
    return planes, r_soma < 1.0


def render_fov(rng, cfg, classes):
    """Render one FOV. Returns ``(planes (C,H,W) in [0,1], instance mask)``."""
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    chans = cfg.channels
    acc = {c: np.zeros((size, size)) for c in chans}
    mask = np.zeros((size, size), dtype=np.int32)
    lo, hi = cfg.cells_per_image
    for cid in range(1, int(rng.integers(lo, hi + 1)) + 1):
        planes, inside = _render_cell(rng, size, yy, xx, classes, cfg.style)
        for c in chans:
            acc[c] = np.maximum(acc[c], planes[c])
        mask[inside] = cid
    noise = 0.02 if cfg.style == "target" else 0.01
    out = np.stack([acc[c] for c in chans])
    out = out + 0.02 + noise * rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0), mask


def _assign_labels(rng, cfg):
    n, k = cfg.n_samples, len(cfg.classes)
    primary = np.arange(n) % k
    primary = primary[rng.permutation(n)]
    out = []
    for i in range(n):
        labels = {cfg.classes[primary[i]]: int(rng.integers(1, 4))}
        if k > 1 and rng.random() < cfg.multi_label_frac:
            other = [c for c in cfg.classes if c not in labels]
            labels[other[int(rng.integers(len(other)))]] = int(rng.integers(1, 4))
        out.append(labels)
    return out


def generate(cfg, seed):
    """Yield ``(MultiChannelImage, raw u16 planes)`` for every sample."""
    rng = np.random.default_rng(seed)
    labels = _assign_labels(rng, cfg)
    for i, lab in enumerate(labels):
        planes, mask = render_fov(rng, cfg, sorted(lab, key=cfg.classes.index))
        raw = np.round(planes * U16_MAX).astype(np.uint16)
        yield MultiChannelImage(cfg.channels, planes.astype(np.float32), mask, lab, f"s{i:05d}"), raw


def gen_synthetic(cfg, seed, root):
    """Render the dataset under ``root`` and return its manifest."""
    records = []
    for img, raw in generate(cfg, seed):
        rec = SampleRecord(
            id=img.id,
            image=f"fov/{img.id}.ctf",
            labels=dict(img.annotations),
            mask=f"masks/{img.id}.ctf" if cfg.write_masks else None,
        )
        write_sample(root, img, rec, raw)
        records.append(rec)
    manifest = DatasetManifest(
        name=cfg.name,
        channels=list(cfg.channels),
        classes=list(cfg.classes),
        samples=records,
        seed=int(seed),
        generator=cfg.to_dict(),
    )
    manifest.validate().save(root)
    return manifest
