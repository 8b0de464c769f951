"""Checkpoint format: raw little-endian float32 params plus a JSON manifest.

A checkpoint is a directory holding ``params.bin`` — every parameter and
buffer array concatenated in state-dict order — and ``manifest.json`` listing
{name, shape, dtype, byte_offset} per array, the detector configuration, and
free-form metadata.  Loading rebuilds the model and validates every shape
exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .detector import DetectorConfig, MiniDetector, load_param_store, param_store
from .distill import AdaptLayer
from .errors import CheckpointError, ConfigurationError

PARAMS_FILE = "params.bin"
MANIFEST_FILE = "manifest.json"
FORMAT_TAG = "concat-float32-le/1"


def config_to_dict(config: DetectorConfig) -> dict:
    return asdict(config)


def config_from_dict(d: dict) -> DetectorConfig:
    def _tup(x):
        return tuple(_tup(v) for v in x) if isinstance(x, (list, tuple)) else x

    known = {f.name for f in dataclasses.fields(DetectorConfig)}
    extra = sorted(set(d) - known)
    if extra:
        raise CheckpointError(f"unknown detector config fields {extra}")
    try:
        cfg = DetectorConfig(
            backbone_widths=_tup(d["backbone_widths"]),
            neck_channels=int(d["neck_channels"]),
            num_levels=int(d["num_levels"]),
            strides=_tup(d["strides"]),
            anchors=_tup(d["anchors"]),
            num_classes=int(d["num_classes"]),
            roi_output=int(d["roi_output"]),
            head_hidden=int(d["head_hidden"]),
            image_size=int(d["image_size"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad detector config in manifest: {e}") from e
    cfg.validate()
    return cfg


def _flat_store(model, adapt_layer):
    store = {f"detector.{k}": v for k, v in param_store(model).items()}
    if adapt_layer is not None:
        store.update({f"adapt.{k}": v for k, v in param_store(adapt_layer).items()})
    return store


def save_checkpoint(dir_path, model: MiniDetector, adapt_layer: AdaptLayer = None,
                    metadata: dict = None) -> Path:
    """Write ``params.bin`` + ``manifest.json`` under ``dir_path``."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    store = _flat_store(model, adapt_layer)
    entries = []
    offset = 0
    with open(dir_path / PARAMS_FILE, "wb") as fh:
        for name, arr in store.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(arr.tobytes())
            entries.append(
                {
                    "name": name,
                    "shape": list(arr.shape),
                    "dtype": "float32",
                    "byte_offset": offset,
                }
            )
            offset += arr.nbytes
    manifest = {
        "format": FORMAT_TAG,
        "config": config_to_dict(model.config),
        "adapt_channels": None
        if adapt_layer is None
        else [
            [p.in_channels, p.out_channels] for p in adapt_layer.projections
        ],
        "params": entries,
        "total_bytes": offset,
        "metadata": metadata or {},
    }
    path = dir_path / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_manifest(dir_path) -> dict:
    path = Path(dir_path) / MANIFEST_FILE
    if not path.exists():
        raise CheckpointError(f"no {MANIFEST_FILE} under {dir_path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed manifest: {e}") from e
    if manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(dir_path):
    """Rebuild (model, adapt_layer_or_None, metadata) from a checkpoint dir.

    Model construction is wrapped in a forked RNG scope so loading a
    checkpoint never perturbs the caller's torch RNG stream.
    """
    dir_path = Path(dir_path)
    manifest = read_manifest(dir_path)
    config = config_from_dict(manifest["config"])

    blob = (dir_path / PARAMS_FILE).read_bytes()
    if len(blob) != manifest.get("total_bytes"):
        raise CheckpointError(
            f"params.bin is {len(blob)} bytes, manifest says {manifest.get('total_bytes')}"
        )
    store = {}
    for entry in manifest["params"]:
        if entry["dtype"] != "float32":
            raise CheckpointError(f"unsupported dtype {entry['dtype']} for {entry['name']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["byte_offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"array {entry['name']} overruns params.bin")
        store[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)

    with torch.random.fork_rng():
        model = MiniDetector(config)
        adapt = None
        if manifest.get("adapt_channels"):
            ins = [c[0] for c in manifest["adapt_channels"]]
            outs = [c[1] for c in manifest["adapt_channels"]]
            adapt = AdaptLayer(ins, outs)

    det_store = {k[len("detector.") :]: v for k, v in store.items() if k.startswith("detector.")}
    try:
        load_param_store(model, det_store)
        if adapt is not None:
            adapt_store = {k[len("adapt.") :]: v for k, v in store.items() if k.startswith("adapt.")}
            load_param_store(adapt, adapt_store)
    except ConfigurationError as e:
        raise CheckpointError(str(e)) from e
    model.eval()
    return model, adapt, manifest.get("metadata", {})
