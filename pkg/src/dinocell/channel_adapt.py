"""Fitting samples with arbitrary channels into fixed-input backbones.

Two strategies:

* channel-wise embedding: a :class:`ChannelMap` places named source planes
  into target input slots and fills the rest with zeros;
* replication: each source plane is copied into every input slot, embedded
  separately, and the per-channel embeddings are concatenated.
"""

from __future__ import annotations

import itertools
import json
import re
from dataclasses import dataclass

import numpy as np

from .backbone import vit_forward
from .errors import LookupFailure, MappingError, ShapeError

# Input slot order of each known backbone family / dataset.
CHANNEL_LAYOUTS = {
    "opencell": ("protein", "nucleus"),
    "hpa-fov": ("microtubules", "protein", "nucleus", "er"),
    "imagenet-rgb": ("R", "G", "B"),
    "synthetic-target": ("protein", "nucleus"),
    "synthetic-source": ("microtubules", "protein", "nucleus", "er"),
}

# Pairs without shared channel names need an explicit choice.
_PRESET_MAPS = {
    ("opencell", "imagenet-rgb"): {"protein": 1, "nucleus": 2},
    ("synthetic-target", "imagenet-rgb"): {"protein": 1, "nucleus": 2},
}

SLOT_LETTERS = {"R": 0, "G": 1, "B": 2, "Y": 3}


@dataclass(frozen=True)
class ChannelMap:
    """Injective assignment of source channel names to target slots."""

    mapping: tuple
    target_slots: int
    fill: float = 0.0

    def __init__(self, mapping, target_slots, fill=0.0):
        items = tuple(mapping.items()) if isinstance(mapping, dict) else tuple(
            (str(k), int(v)) for k, v in mapping)
        object.__setattr__(self, "mapping", items)
        object.__setattr__(self, "target_slots", int(target_slots))
        object.__setattr__(self, "fill", float(fill))
        self.validate()

    def validate(self):
        slots = [s for _, s in self.mapping]
        names = [n for n, _ in self.mapping]
        if len(set(names)) != len(names):
            raise MappingError(f"source channel listed twice in {dict(self.mapping)}")
        if len(set(slots)) != len(slots):
            raise MappingError(f"duplicate target slot in {dict(self.mapping)}")
        if any(not 0 <= s < self.target_slots for s in slots):
            raise MappingError(f"slot out of range 0..{self.target_slots - 1} in {dict(self.mapping)}")
        return self

    def as_dict(self):
        return dict(self.mapping)

    def slots(self):
        return [s for _, s in self.mapping]

    def to_json(self):
        return json.dumps({"target_slots": self.target_slots, "map": self.as_dict(),
                           "fill": self.fill})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text) if isinstance(text, str) else text
        return cls(d["map"], d["target_slots"], d.get("fill", 0.0))

    def label(self, source_channels=None):
        """Compact ``[1, 2] -> [1, 2]`` style label (slot letters for 3 slots)."""
        src = list(source_channels) if source_channels else [n for n, _ in self.mapping]
        m = self.as_dict()
        tgt = [m[n] for n in src if n in m]
        if self.target_slots == 3:
            inv = {v: k for k, v in SLOT_LETTERS.items()}
            tgt = [inv[s] for s in tgt]
        return f"{list(range(1, len(src) + 1))} -> [{', '.join(map(str, tgt))}]"


def parse_map(spec, slots, source_channels=None):
    """Parse a CLI map.

    Accepts ``protein=1,nucleus=2`` or the positional shorthand
    ``[1, 2] -> [G, B]`` where the i-th entry on the left stands for the
    i-th source channel (``source_channels`` order) and targets are slot
    indices or the letters R, G, B, Y.
    """
    spec = spec.strip()
    m = re.fullmatch(r"\[([^\]]*)\]\s*(?:->|→)\s*\[([^\]]*)\]", spec)
    if m:
        if source_channels is None:
            raise MappingError("positional map shorthand needs the source channel list")
        left = [t.strip() for t in m.group(1).split(",") if t.strip()]
        right = [t.strip() for t in m.group(2).split(",") if t.strip()]
        if len(left) != len(right) or len(left) > len(source_channels):
            raise MappingError(f"cannot pair {left} with {right}")
        pairs = {}
        for i, tok in enumerate(right):
            slot = SLOT_LETTERS.get(tok.upper()) if not tok.isdigit() else int(tok)
            if slot is None:
                raise MappingError(f"unknown slot {tok!r}")
            pairs[source_channels[i]] = slot
        return ChannelMap(pairs, slots)
    pairs = {}
    for part in spec.split(","):
        if "=" not in part:
            raise MappingError(f"bad map entry {part!r}; expected name=slot")
        name, slot = part.split("=", 1)
        slot = slot.strip()
        pairs[name.strip()] = SLOT_LETTERS[slot.upper()] if slot.upper() in SLOT_LETTERS else int(slot)
    return ChannelMap(pairs, slots)


def _planes_and_names(image, channels=None):
    if hasattr(image, "planes"):
        return image.planes, tuple(image.channels)
    if channels is None:
        raise MappingError("raw arrays need explicit channel names")
    return np.asarray(image), tuple(channels)


def channel_map_apply(image, cmap, channels=None):
    """Place mapped planes into a ``(target_slots, H, W)`` array.

    ``image`` is a MultiChannelImage, or a ``(C, H, W)`` / ``(N, C, H, W)``
    array together with ``channels``.
    """
    planes, names = _planes_and_names(image, channels)
    lead = planes.shape[:-3]
    out = np.full(lead + (cmap.target_slots,) + planes.shape[-2:], cmap.fill, dtype=planes.dtype)
    for name, slot in cmap.mapping:
        if name not in names:
            raise MappingError(f"source channel {name!r} not in {names}")
        out[..., slot, :, :] = planes[..., names.index(name), :, :]
    return out


def replicate_inputs(planes, c_in):
    """``(N, C, H, W)`` -> ``(C, N, c_in, H, W)``: each plane copied into all slots."""
    planes = np.asarray(planes)
    per = np.moveaxis(planes, -3, 0)[:, :, None]
    return np.broadcast_to(per, per.shape[:2] + (c_in,) + per.shape[-2:])


def replicate_embed(backbone_state, image, batch_size=64):
    """Concatenated per-channel embeddings, length ``n_channels * D``.

    Accepts one image (MultiChannelImage or ``(C, H, W)``) or a stack
    ``(N, C, H, W)``; output is ``(n*D,)`` or ``(N, n*D)`` respectively.
    """
    cfg = backbone_state.config
    planes = image.planes if hasattr(image, "planes") else np.asarray(image)
    single = planes.ndim == 3
    stack = planes[None] if single else planes
    if stack.shape[-2:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"images are {stack.shape[-2:]}, backbone wants {cfg.image_size}px")
    reps = replicate_inputs(stack, cfg.input_channels)
    segs = []
    for ch in range(reps.shape[0]):
        parts = []
        for s in range(0, stack.shape[0], batch_size):
            emb, _ = vit_forward(backbone_state, np.ascontiguousarray(reps[ch, s:s + batch_size]))
            parts.append(emb)
        segs.append(np.concatenate(parts, axis=0))
    out = np.concatenate(segs, axis=1)
    return out[0] if single else out


def natural_map(source, target):
    """Semantic channel alignment between two registered layouts."""
    try:
        src = CHANNEL_LAYOUTS[source]
        tgt = CHANNEL_LAYOUTS[target]
    except KeyError as exc:
        raise LookupFailure(f"unregistered layout {exc.args[0]!r}") from None
    if (source, target) in _PRESET_MAPS:
        return ChannelMap(_PRESET_MAPS[(source, target)], len(tgt))
    if all(c in tgt for c in src):
        return ChannelMap({c: tgt.index(c) for c in src}, len(tgt))
    raise LookupFailure(f"no natural mapping from {source!r} to {target!r}")


def enumerate_maps(n_source, c_target, source_channels=None):
    """Every injective placement of ``n_source`` channels into ``c_target`` slots."""
    if n_source > c_target:
        raise MappingError(f"cannot place {n_source} channels into {c_target} slots")
    names = list(source_channels) if source_channels else [f"ch{i}" for i in range(n_source)]
    if len(names) != n_source:
        raise MappingError("source_channels length differs from n_source")
    return [ChannelMap(dict(zip(names, perm)), c_target)
            for perm in itertools.permutations(range(c_target), n_source)]
