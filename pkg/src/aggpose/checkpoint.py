"""Checkpoint persistence: JSON manifest header + raw little-endian arrays.

Layout::

    8 bytes   magic "AGPCKPT1"
    8 bytes   header length (uint64, little-endian)
    header    UTF-8 JSON {"manifest": [{name, shape, dtype}...], "metadata": {...}}
    payload   raw array bytes, row-major, little-endian, in manifest order

Model parameters are stored under ``param/`` names; the trainer adds
optimizer moments under ``optim/``.  Loading back into a model verifies
shape equality per name.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"AGPCKPT1"
_DTYPE_CODES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}

PARAM_PREFIX = "param/"
OPTIM_PREFIX = "optim/"


def write_checkpoint(path, arrays: dict, metadata: dict | None = None) -> None:
    """Write named float arrays atomically (temp file + rename)."""
    manifest = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        code = "<f4" if arr.dtype == np.float32 else "<f8"
        if arr.dtype not in (np.float32, np.float64):
            raise CheckpointError(f"array {name} has unsupported dtype {arr.dtype}")
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": code})
    header = json.dumps({"manifest": manifest, "metadata": metadata or {}}).encode()

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(len(header).to_bytes(8, "little"))
            f.write(header)
            for entry, arr in zip(manifest, arrays.values()):
                f.write(np.ascontiguousarray(arr).astype(entry["dtype"], copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    arrays: dict
    metadata: dict

    def section(self, prefix: str) -> dict:
        return {
            name[len(prefix) :]: arr
            for name, arr in self.arrays.items()
            if name.startswith(prefix)
        }


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
        header_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(header_len).decode())
        arrays = {}
        for entry in header["manifest"]:
            dtype = _DTYPE_CODES[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(count * dtype.itemsize)
            if len(buf) != count * dtype.itemsize:
                raise CheckpointError(f"{path} truncated while reading {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"]).copy()
    return Checkpoint(arrays=arrays, metadata=header.get("metadata", {}))


def save_model(path, model, metadata: dict | None = None) -> None:
    meta = {"config": model.cfg.to_dict(), "config_hash": model.cfg.config_hash()}
    meta.update(metadata or {})
    arrays = {PARAM_PREFIX + name: data for name, data in model.state_arrays().items()}
    write_checkpoint(path, arrays, meta)


@dataclass
class LoadReport:
    loaded: list = field(default_factory=list)
    missing: list = field(default_factory=list)  # model parameters absent from the file
    unexpected: list = field(default_factory=list)  # file entries with no model parameter

    @property
    def complete(self) -> bool:
        return not self.missing and not self.unexpected


def load_into_model(model, ckpt, policy: str = "strict", freeze_levels=None) -> LoadReport:
    """Copy checkpointed parameters into ``model``.

    strict           every model parameter must be covered, nothing extra
    by-prefix        load the intersection, report misses/extras
    per-level-frozen by-prefix, then mark ``freeze_levels`` non-trainable
    """
    if policy not in ("strict", "by-prefix", "per-level-frozen"):
        raise CheckpointError(f"unknown load policy {policy!r}")
    if isinstance(ckpt, (str, os.PathLike)):
        ckpt = read_checkpoint(ckpt)
    stored = ckpt.section(PARAM_PREFIX)
    report = LoadReport()
    params = dict(model.named_parameters())
    for name, p in params.items():
        if name not in stored:
            report.missing.append(name)
            continue
        arr = stored[name]
        if tuple(arr.shape) != p.shape:
            raise CheckpointError(
                f"shape conflict for {name}: checkpoint {tuple(arr.shape)} vs model {p.shape}"
            )
        p.data = np.ascontiguousarray(arr.astype(model.dtype, copy=False))
        report.loaded.append(name)
    report.unexpected = sorted(set(stored) - set(params))
    if policy == "strict" and not report.complete:
        raise CheckpointError(
            f"strict load failed: missing {report.missing[:5]}..., unexpected {report.unexpected[:5]}..."
            if len(report.missing) > 5 or len(report.unexpected) > 5
            else f"strict load failed: missing {report.missing}, unexpected {report.unexpected}"
        )
    if policy == "per-level-frozen":
        model.freeze_levels(freeze_levels or [])
    return report
