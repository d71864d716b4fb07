"""Checkpoint archives: named tensors keyed ``group/name`` plus a JSON manifest.

Archives are uncompressed zip files with fixed timestamps and sorted
entries, so identical parameters always produce identical bytes. Writes go
to a temporary file that is renamed into place.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ..errors import CheckpointError

SCHEMA_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def _tensor_key(state_key: str) -> str:
    group, _, rest = state_key.partition(".")
    return f"{group}/{rest}"


def save_checkpoint(path, model: nn.Module, *, config_hash: str, stage: int, step: int,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    keys = sorted(state)
    manifest = {
        "v": SCHEMA_VERSION,
        "config_hash": config_hash,
        "stage": stage,
        "step": step,
        "tensors": [_tensor_key(k) for k in keys],
    }
    cfg = getattr(model, "cfg", None)
    if cfg is not None and hasattr(cfg, "to_dict"):
        manifest["model_config"] = cfg.to_dict()
    if extra:
        manifest["extra"] = extra
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh, zipfile.ZipFile(fh, "w") as zf:
            zf.writestr(_entry("manifest.json"), json.dumps(manifest, sort_keys=True, indent=1))
            for key in keys:
                buf = io.BytesIO()
                np.save(buf, state[key].detach().cpu().numpy(), allow_pickle=False)
                zf.writestr(_entry(_tensor_key(key) + ".npy"), buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("v") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint schema {manifest.get('v')!r}")
    return manifest


def load_checkpoint(path, model: nn.Module, *, config_hash: str | None = None) -> dict:
    """Load tensors into ``model`` in place and return the manifest."""
    manifest = read_manifest(path)
    if config_hash is not None and manifest["config_hash"] != config_hash:
        raise CheckpointError(f"{path}: config hash {manifest['config_hash']} != expected {config_hash}")
    state = model.state_dict()
    expected = {_tensor_key(k): k for k in state}
    if set(manifest["tensors"]) != set(expected):
        missing = sorted(set(expected) - set(manifest["tensors"]))
        unexpected = sorted(set(manifest["tensors"]) - set(expected))
        raise CheckpointError(f"{path}: tensor mismatch, missing={missing[:5]} unexpected={unexpected[:5]}")
    new_state = {}
    with zipfile.ZipFile(path) as zf:
        for tkey, skey in expected.items():
            arr = np.load(io.BytesIO(zf.read(tkey + ".npy")), allow_pickle=False)
            new_state[skey] = torch.from_numpy(arr.copy())
    model.load_state_dict(new_state)
    return manifest


def load_model(path, seed: int = 0):
    """Rebuild a model from the config stored in a checkpoint and load its tensors."""
    from .config import ModelConfig
    from .dit import build_model

    manifest = read_manifest(path)
    if "model_config" not in manifest:
        raise CheckpointError(f"{path}: checkpoint does not record its model config")
    cfg = ModelConfig.from_dict(manifest["model_config"])
    model = build_model(cfg, seed)
    load_checkpoint(path, model, config_hash=cfg.config_hash())
    model.eval()
    return model, manifest
