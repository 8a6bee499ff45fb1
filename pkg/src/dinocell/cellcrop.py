"""Single-cell crops from field-of-view images and instance masks.

Each positive mask id yields one square cutout centred on the rounded
centroid of its pixels, zero-padded at the image border. Crops can be zoomed
2x around their centre and filtered by their fraction of exactly-zero pixels
in the protein channel.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ctf
from .data import DatasetManifest, MultiChannelImage, read_sample
from .errors import ConfigError, DataError, ShapeError

CROP_SIZE = 512
BLACK_PERCENTILE = 99.7
MANIFEST_FIELDS = ("fov_id", "instance_id", "centroid_r", "centroid_c", "black_fraction", "kept")


@dataclass
class CellCrop:
    planes: np.ndarray
    fov_id: str
    instance_id: int
    centroid: tuple
    channels: tuple = ()
    annotations: dict = field(default_factory=dict)
    black_fraction: float = 0.0

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[1] != self.planes.shape[2]:
            raise ShapeError(f"crop planes must be (C, S, S), got {self.planes.shape}")

    @property
    def size(self):
        return self.planes.shape[-1]


def _round_half_up(v):
    return int(math.floor(v + 0.5))


def centroids(mask):
    """``{instance_id: (row, col)}`` mean pixel coordinates of each positive id."""
    mask = np.asarray(mask)
    ids = np.unique(mask)
    ids = ids[ids > 0]
    if ids.size == 0:
        return {}
    rows, cols = np.indices(mask.shape)
    flat = mask.ravel()
    inv = np.searchsorted(ids, flat[flat > 0])
    cnt = np.bincount(inv, minlength=ids.size).astype(np.float64)
    r = np.bincount(inv, weights=rows.ravel()[flat > 0], minlength=ids.size) / cnt
    c = np.bincount(inv, weights=cols.ravel()[flat > 0], minlength=ids.size) / cnt
    return {int(i): (float(r[k]), float(c[k])) for k, i in enumerate(ids)}


def _window(planes, r0, c0, size):
    # zero-padded planes[:, r0:r0+size, c0:c0+size]
    C, H, W = planes.shape
    out = np.zeros((C, size, size), dtype=planes.dtype)
    rs, re = max(r0, 0), min(r0 + size, H)
    cs, ce = max(c0, 0), min(c0 + size, W)
    if rs < re and cs < ce:
        out[:, rs - r0:re - r0, cs - c0:ce - c0] = planes[:, rs:re, cs:ce]
    return out


def black_fraction(planes, channel_index):
    p = planes[channel_index]
    return float(np.count_nonzero(p == 0)) / p.size


def extract_cells(fov: MultiChannelImage, mask=None, crop_size=CROP_SIZE, mask_out=False,
                  protein="protein"):
    """One crop per instance id, with the rounded centroid at ``(crop_size//2, crop_size//2)``.

    ``mask_out`` zeroes pixels that do not belong to the cell (off by default).
    """
    mask = fov.mask if mask is None else np.asarray(mask)
    if mask is None:
        raise DataError(f"FOV {fov.id!r} has no instance mask")
    if mask.shape != fov.planes.shape[1:]:
        raise ShapeError(f"mask {mask.shape} vs FOV {fov.planes.shape[1:]}")
    if crop_size < 2 or crop_size % 2:
        raise ConfigError("crop_size must be an even integer >= 2")
    pidx = fov.channels.index(protein) if protein in fov.channels else 0
    half = crop_size // 2
    crops = []
    for iid, (r, c) in centroids(mask).items():
        rr, cc = _round_half_up(r), _round_half_up(c)
        planes = _window(fov.planes, rr - half, cc - half, crop_size)
        if mask_out:
            own = _window((mask == iid)[None], rr - half, cc - half, crop_size)[0]
            planes = planes * own
        crops.append(CellCrop(planes, fov.id, iid, (r, c), fov.channels, dict(fov.annotations),
                              black_fraction(planes, pidx)))
    return crops


def zoom2x(crop):
    """Bilinear 2x zoom on the central half-size window, keeping the crop size.

    Output pixel ``j`` samples source coordinate ``S/4 + j/2 - 1/4`` (pixel
    centres at integers), so a linear ramp keeps its exact value at the
    continuous image centre and its slope halves per output pixel.
    """
    planes = crop.planes if isinstance(crop, CellCrop) else np.asarray(crop)
    if planes.ndim != 3 or planes.shape[1] != planes.shape[2] or planes.shape[1] % 4:
        raise ShapeError(f"zoom2x needs (C, S, S) with S divisible by 4, got {planes.shape}")
    s = planes.shape[1]
    coord = s / 4 + np.arange(s) / 2 - 0.25
    i0 = np.clip(np.floor(coord).astype(np.int64), 0, s - 1)
    i1 = np.clip(i0 + 1, 0, s - 1)
    f = (coord - np.floor(coord)).astype(np.float64)
    src = planes.astype(np.float64)
    rows = src[:, i0, :] * (1 - f)[None, :, None] + src[:, i1, :] * f[None, :, None]
    out = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i1] * f[None, None, :]
    out = out.astype(planes.dtype if planes.dtype.kind == "f" else np.float32)
    if not isinstance(crop, CellCrop):
        return out
    pidx = crop.channels.index("protein") if "protein" in crop.channels else 0
    return replace(crop, planes=out, black_fraction=black_fraction(out, pidx))


def nearest_rank(values, percentile):
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise DataError("percentile of an empty list")
    rank = max(1, math.ceil(percentile / 100.0 * v.size))
    return float(v[min(rank, v.size) - 1])


def filter_black(crops, percentile=BLACK_PERCENTILE):
    """Split crops into ``(kept, threshold)``: drop those whose black fraction exceeds
    the nearest-rank percentile of the batch."""
    if not crops:
        raise DataError("filter_black needs at least one crop")
    if not 0 < percentile <= 100:
        raise ConfigError("percentile must lie in (0, 100]")
    thr = nearest_rank([c.black_fraction for c in crops], percentile)
    return [c for c in crops if c.black_fraction <= thr], thr


def extract_dataset(root, manifest: DatasetManifest, out, crop_size=CROP_SIZE, zoom=True,
                    percentile=BLACK_PERCENTILE, mask_out=False, records=None):
    """Crop every FOV of a dataset, filter, and write retained crops plus a manifest CSV.

    Returns the retained crops. Crops are written as raw-intensity CTF1 under
    ``cells/<fov_id>/<instance_id>.ctf`` with a JSON sidecar.
    """
    out = Path(out)
    records = manifest.samples if records is None else records
    crops = []
    for rec in records:
        if rec.mask is None:
            raise DataError(f"sample {rec.id!r} has no instance mask")
        fov = read_sample(root, manifest, rec, normalize=False)
        for crop in extract_cells(fov, crop_size=crop_size, mask_out=mask_out):
            crops.append(zoom2x(crop) if zoom else crop)
    if not crops:
        raise DataError("no cells found in any mask")
    kept, _ = filter_black(crops, percentile)
    keep_ids = {(c.fov_id, c.instance_id) for c in kept}
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for c in crops:
            k = (c.fov_id, c.instance_id) in keep_ids
            w.writerow([c.fov_id, c.instance_id, f"{c.centroid[0]:.6g}", f"{c.centroid[1]:.6g}",
                        f"{c.black_fraction:.6g}", int(k)])
    for c in kept:
        d = out / "cells" / c.fov_id
        d.mkdir(parents=True, exist_ok=True)
        ctf.save(d / f"{c.instance_id}.ctf", c.planes.astype(np.float32))
        side = {"fov_id": c.fov_id, "instance_id": c.instance_id, "centroid": list(c.centroid),
                "channels": list(c.channels), "labels": c.annotations,
                "black_fraction": c.black_fraction}
        (d / f"{c.instance_id}.json").write_text(json.dumps(side))
    return kept
