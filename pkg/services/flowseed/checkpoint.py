"""
Parameter checkpoints: a JSON manifest (name -> shape -> byte offset) and one
little-endian float32 blob. Round trips are bit-exact.

Layout of a checkpoint directory:
<ckpt>/
    params.json
    params.bin
    model.json    (hyperparameter sidecar, written by the flow model)
"""
import json
from pathlib import Path
from typing import Any, Dict

import numpy as np

from autodiff import ParamStore
from errors import ConfigurationError, SchemaError

CHECKPOINT_FORMAT = "flowseed-params"
CHECKPOINT_VERSION = 1

MANIFEST_NAME = "params.json"
BLOB_NAME = "params.bin"


def save_params(store: ParamStore, ckpt_dir: Path) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    chunks = []
    for name in store.names():
        arr = np.ascontiguousarray(store.params[name], dtype="<f4")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)

    manifest: Dict[str, Any] = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": store.step,
        "total_bytes": offset,
        "tensors": entries,
    }
    with open(ckpt_dir / BLOB_NAME, "wb") as f:
        for raw in chunks:
            f.write(raw)
    with open(ckpt_dir / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return ckpt_dir


def load_params(ckpt_dir: Path) -> ParamStore:
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / MANIFEST_NAME
    blob_path = ckpt_dir / BLOB_NAME
    if not manifest_path.exists() or not blob_path.exists():
        raise ConfigurationError(f"Checkpoint not found: {ckpt_dir}")

    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise SchemaError(
            f"Unsupported checkpoint format {manifest.get('format')} v{manifest.get('version')}"
        )

    blob = blob_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise SchemaError(f"Checkpoint blob size {len(blob)} != manifest {manifest['total_bytes']}")

    store = ParamStore()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
        store.add(entry["name"], arr.astype(np.float32))
    store.step = int(manifest.get("step", 0))
    return store
