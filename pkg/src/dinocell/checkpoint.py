"""Named parameter collections and their on-disk checkpoint format.

A checkpoint is a directory holding ``manifest.json`` plus one CTF1 file per
parameter. The manifest records the owning config, every parameter's shape,
dtype and digest, and a digest over all payloads in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import ctf
from .errors import ConfigError, CorruptionError, ResolutionError

FORMAT = "dinocell-checkpoint/1"
_CONFIGS = {}


def register_config(kind):
    """Class decorator: make a config dataclass loadable from a manifest."""

    def deco(cls):
        cls.kind = kind
        _CONFIGS[kind] = cls
        return cls

    return deco


@dataclass
class ModelState:
    config: object
    params: dict = field(default_factory=dict)

    @property
    def kind(self):
        return self.config.kind

    def copy(self):
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        return ModelState(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def n_params(self):
        return int(sum(v.size for v in self.params.values()))


def _file_name(name):
    return name.replace("/", "_") + ".ctf"


def save_checkpoint(state, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    total = hashlib.sha256()
    table = []
    for name, arr in state.params.items():
        fname = _file_name(name)
        data = ctf.save(path / fname, arr)
        total.update(data)
        table.append(
            {
                "name": name,
                "file": fname,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "sha256": hashlib.sha256(data).hexdigest(),
            }
        )
    manifest = {
        "format": FORMAT,
        "kind": state.kind,
        "config": state.config.to_dict(),
        "parameters": table,
        "checksum": total.hexdigest(),
    }
    tmp = path / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, path / "manifest.json")
    return manifest


def read_manifest(path):
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise ResolutionError(str(path), "checkpoint")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{mpath}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CorruptionError(f"{mpath}: unsupported format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path, expect=None):
    """Load and verify a checkpoint.

    ``expect`` is an optional config; a mismatch raises ``ConfigError``.
    """
    path = Path(path)
    manifest = read_manifest(path)
    cls = _CONFIGS.get(manifest["kind"])
    if cls is None:
        raise CorruptionError(f"{path}: unknown checkpoint kind {manifest['kind']!r}")
    config = cls.from_dict(manifest["config"])
    if expect is not None and expect != config:
        raise ConfigError(f"{path}: checkpoint config {config} does not match {expect}")
    total = hashlib.sha256()
    params = {}
    for entry in manifest["parameters"]:
        fpath = path / entry["file"]
        try:
            data = fpath.read_bytes()
        except FileNotFoundError:
            raise CorruptionError(f"{fpath}: parameter file missing") from None
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CorruptionError(f"{fpath}: checksum mismatch")
        total.update(data)
        arr = ctf.decode(data, str(fpath))
        if list(arr.shape) != entry["shape"]:
            raise CorruptionError(f"{fpath}: shape {arr.shape} != manifest {entry['shape']}")
        params[entry["name"]] = arr
    if total.hexdigest() != manifest["checksum"]:
        raise CorruptionError(f"{path}: content checksum mismatch")
    return ModelState(config, params)
