"""Versioned binary checkpoint blobs.

Layout: 8-byte magic, u32 header length, JSON header, raw little-endian
tensor data. The header carries {format_version, config, manifest}, where the
manifest lists every tensor's name/dtype/shape/offset. Writes are atomic
(temp file + rename) and byte-deterministic for identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"EFLCKPT\x01"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray | torch.Tensor]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {}
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arrays[name] = np.ascontiguousarray(value)

    manifest = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        manifest.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": int(arr.nbytes),
            }
        )
        offset += arr.nbytes

    header = json.dumps(
        {"format_version": FORMAT_VERSION, "config": config, "manifest": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for entry in manifest:
                fh.write(arrays[entry["name"]].astype(arrays[entry["name"]].dtype, copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    header_start = len(MAGIC) + 4
    header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {header['format_version']}")
    data_start = header_start + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        start = data_start + entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        tensors[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header["config"], tensors


def module_state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}


def load_module_state(module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for name, param in module.state_dict().items():
        key = prefix + name
        if key not in tensors:
            raise KeyError(f"checkpoint missing tensor {key!r}")
        state[name] = torch.from_numpy(tensors[key]).to(param.dtype)
    module.load_state_dict(state)


def param_fingerprint(module: torch.nn.Module) -> str:
    """sha256 over the module's state tensors; detects any parameter change."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return digest.hexdigest()
