"""Checkpoint persistence: one tensor-container file plus a JSON offset manifest."""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np

from .errors import SchemaError
from .layers import ParamStore
from .tensor import read_tensor, write_tensor

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.json"
STATE_FILE = "state.json"

_OPT_PREFIX = "opt."


def save_checkpoint(
    ckpt_dir,
    params: ParamStore,
    momentum_state: Optional[dict] = None,
    extra_state: Optional[dict] = None,
):
    """Write weights.bin + manifest.json (+ state.json) into `ckpt_dir`.

    Momentum buffers are stored in the same container under an `opt.`
    path prefix. Output bytes are a pure function of the inputs.
    """
    os.makedirs(ckpt_dir, exist_ok=True)
    offsets = {}
    with open(os.path.join(ckpt_dir, WEIGHTS_FILE), "wb") as fh:
        for path, t in params.items():
            offsets[path] = write_tensor(fh, t.data)
        if momentum_state:
            for path in sorted(momentum_state):
                offsets[_OPT_PREFIX + path] = write_tensor(fh, momentum_state[path])
    with open(os.path.join(ckpt_dir, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(offsets, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if extra_state is not None:
        with open(os.path.join(ckpt_dir, STATE_FILE), "w", encoding="utf-8") as fh:
            json.dump(extra_state, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_checkpoint_arrays(ckpt_dir) -> dict:
    manifest_path = os.path.join(ckpt_dir, MANIFEST_FILE)
    if not os.path.exists(manifest_path):
        raise SchemaError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        offsets = json.load(fh)
    arrays = {}
    with open(os.path.join(ckpt_dir, WEIGHTS_FILE), "rb") as fh:
        for path, offset in offsets.items():
            fh.seek(offset)
            arrays[path] = read_tensor(fh)
    return arrays


def load_checkpoint(ckpt_dir, params: ParamStore) -> dict:
    """Restore parameters in place; returns the momentum-state dict."""
    arrays = load_checkpoint_arrays(ckpt_dir)
    momentum = {}
    seen = set()
    for path, arr in arrays.items():
        if path.startswith(_OPT_PREFIX):
            momentum[path[len(_OPT_PREFIX) :]] = arr
            continue
        if path not in params:
            raise SchemaError(f"checkpoint parameter {path} not in model")
        t = params[path]
        if t.data.shape != arr.shape:
            raise SchemaError(f"checkpoint parameter {path}: shape {arr.shape} != model {t.data.shape}")
        t.data = np.array(arr)
        seen.add(path)
    missing = {p for p, _ in params.items()} - seen
    if missing:
        raise SchemaError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    return momentum


def load_extra_state(ckpt_dir) -> Optional[dict]:
    path = os.path.join(ckpt_dir, STATE_FILE)
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
