"""Checkpoint files: a JSON topology descriptor next to a flat float32 blob."""

import json
from pathlib import Path

import numpy as np

from ..errors import BadDataset, FormatVersionError, ShapeMismatch
from .layers import LayerSpec, Network

CHECKPOINT_FORMAT = "qspace-checkpoint"
CHECKPOINT_VERSION = "1.0"


def save_checkpoint(net: Network, path, meta: dict = None) -> Path:
    """Write ``<path>.json`` and ``<path>.f32``; returns the descriptor path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".f32")
    params = []
    offset = 0
    for name, p in net.named_parameters():
        params.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.data.size
    np.ascontiguousarray(net.get_flat(), dtype="<f4").tofile(blob)
    desc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "tag": net.tag,
            "layers": [s.to_dict() for s in net.specs], "parameters": params,
            "n_values": offset, "blob": blob.name, "meta": meta or {}}
    out = path.with_suffix(".json")
    out.write_text(json.dumps(desc, indent=1, sort_keys=True) + "\n")
    return out


def load_checkpoint(path):
    path = Path(path).with_suffix(".json")
    if not path.is_file():
        raise BadDataset(f"missing checkpoint {path}")
    desc = json.loads(path.read_text())
    if desc.get("format") != CHECKPOINT_FORMAT:
        raise BadDataset(f"{path} is not a checkpoint")
    if desc.get("version") != CHECKPOINT_VERSION:
        raise FormatVersionError(f"checkpoint version {desc.get('version')!r}")
    net = Network([LayerSpec(**s) for s in desc["layers"]], tag=desc.get("tag", ""))
    flat = np.fromfile(path.parent / desc["blob"], dtype="<f4")
    if flat.size != desc["n_values"] or flat.size != net.n_parameters():
        raise ShapeMismatch(f"checkpoint blob has {flat.size} values, topology needs {net.n_parameters()}")
    net.set_flat(flat.astype(np.float32))
    return net, desc.get("meta", {})
