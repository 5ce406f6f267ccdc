"""Versioned JSON checkpoints with bit-exact hexadecimal float encoding."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..errors import CheckpointError, ShapeError
from ..network import Network, NetworkSpec

FORMAT_VERSION = 1


def encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v).hex() for v in a.reshape(-1)]}


def decode_array(d: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in d["shape"])
        values = np.array([float.fromhex(v) for v in d["values"]], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{name}: unreadable array ({exc})") from exc
    if values.size != int(np.prod(shape)):
        raise CheckpointError(f"{name}: {values.size} values do not fill shape {shape}")
    return values.reshape(shape)


def dumps_checkpoint(net: Network, metadata: dict | None = None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": net.spec.to_dict(),
        "params": {name: encode_array(p.data) for name, p in net.params.items()},
        "metadata": metadata or {},
    }
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def save_checkpoint(net: Network, path, metadata: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps_checkpoint(net, metadata))


def read_checkpoint(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {version!r} is incompatible with {FORMAT_VERSION}")
    return doc


def load_checkpoint(path, spec: NetworkSpec | None = None) -> Network:
    """Load a network; with ``spec`` given, the stored parameters must fit it."""
    doc = read_checkpoint(path)
    stored = NetworkSpec.from_dict(doc["spec"])
    target = spec or stored
    params = {name: Tensor(decode_array(arr, name), True, name) for name, arr in doc["params"].items()}
    try:
        return Network(target, params)
    except ShapeError as exc:
        raise ShapeError(f"checkpoint {path} does not fit the requested spec: {exc}") from exc


def checkpoint_metadata(path) -> dict:
    return read_checkpoint(path).get("metadata", {})
