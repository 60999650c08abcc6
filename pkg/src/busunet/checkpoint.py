"""Checkpoint directories: a JSON manifest plus one BTEN file per tensor."""

from __future__ import annotations

import configparser
import json
import shutil
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .architectures import Network, config_from_parser, config_to_text
from .engine import bten
from .errors import FormatError, PrecisionMismatchError

MANIFEST = "manifest.json"


def state_dict(net: Network) -> dict[str, np.ndarray]:
    """Copies of every parameter and buffer, keyed by qualified name."""
    state = {name: p.data.copy() for name, p in net.named_parameters()}
    state.update({name: b.copy() for name, b in net.named_buffers()})
    return state


def load_state(net: Network, state: dict[str, np.ndarray]) -> None:
    """Copy ``state`` into ``net`` in place; names and shapes must match."""
    targets: dict[str, np.ndarray] = {name: p.data for name, p in net.named_parameters()}
    targets.update(dict(net.named_buffers()))
    if set(targets) != set(state):
        missing = sorted(set(targets) - set(state))
        extra = sorted(set(state) - set(targets))
        raise FormatError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, dst in targets.items():
        src = state[name]
        if src.shape != dst.shape:
            raise FormatError(f"{name}: stored shape {src.shape} != expected {dst.shape}")
        dst[...] = src


def _filename(name: str) -> str:
    return name + ".bten"


def save_checkpoint(net: Network, path, extra: Optional[dict] = None) -> Path:
    """Write ``net`` to directory ``path``, replacing it atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    tensors = []
    for name, arr in state_dict(net).items():
        bten.save(tmp / _filename(name), arr)
        tensors.append({"name": name, "shape": list(arr.shape), "file": _filename(name)})
    manifest = {
        "kind": "checkpoint",
        "version": __version__,
        "dtype": net.dtype.name,
        "seed": net.seed,
        "config": config_to_text(net.config),
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    if path.exists():
        shutil.rmtree(path)
    tmp.rename(path)
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        return json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no checkpoint manifest") from None
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt checkpoint manifest ({exc})") from None


def load_checkpoint(path, dtype=None) -> Network:
    """Rebuild the network stored at ``path``.

    Every tensor is read and validated before the network is returned. With
    ``dtype`` given, a checkpoint stored at another precision raises
    :class:`PrecisionMismatchError` rather than being converted.
    """
    path = Path(path)
    manifest = read_manifest(path)
    stored = np.dtype(manifest["dtype"])
    if dtype is not None and np.dtype(dtype) != stored:
        raise PrecisionMismatchError(f"{path}: checkpoint is {stored.name}, run requested {np.dtype(dtype).name}")
    parser = configparser.ConfigParser()
    parser.read_string(manifest["config"])
    net = Network(config_from_parser(parser), seed=int(manifest.get("seed", 0)), dtype=stored)
    expected = {name: p.shape for name, p in net.named_parameters()}
    expected.update({name: b.shape for name, b in net.named_buffers()})
    listed = {t["name"]: t for t in manifest["tensors"]}
    if set(listed) != set(expected):
        raise FormatError(f"{path}: tensor list does not match the stored architecture")
    state = {}
    for name, shape in expected.items():
        file = path / listed[name]["file"]
        try:
            buf = file.read_bytes()
        except OSError as exc:
            raise FormatError(f"{name}: cannot read {file.name} ({exc.strerror})") from None
        arr = bten.loads(buf, expect_dtype=stored, label=name)
        if arr.shape != shape:
            raise FormatError(f"{name}: stored shape {arr.shape} != expected {shape}")
        state[name] = arr
    load_state(net, state)
    return net
