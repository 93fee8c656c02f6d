"""
Checkpoint archive.

Layout: 8 magic bytes, the header length as a little-endian uint64,
a UTF-8 JSON header, then the tensor payloads in header order as raw
little-endian float32. Integer buffers are stored as int64 and boolean
buffers as one byte per value.
"""
import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
import torch
from loguru import logger as log
from radvit.core.seeding import config_digest, get_rng_state
from radvit.core.store import ParameterStore
from radvit.exceptions import ConfigError, IntegrityError

MAGIC = b"RADVITCK"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")

_DTYPES = {
    "float32": ("<f4", torch.float32),
    "int64": ("<i8", torch.int64),
    "bool": ("|b1", torch.bool),
}


def _payload(name: str, tensor: torch.Tensor) -> "tuple[str, bytes]":
    t = tensor.detach().cpu().contiguous()
    if t.dtype == torch.bool:
        dtype = "bool"
    elif t.is_floating_point():
        dtype = "float32"
    else:
        dtype = "int64"
    np_dtype, torch_dtype = _DTYPES[dtype]
    if t.dtype != torch_dtype:
        log.debug("Storing {} ({}) as {}", name, t.dtype, dtype)
    array = t.to(torch_dtype).numpy().astype(np_dtype, copy=False)
    return dtype, array.tobytes()


def save_checkpoint(
    store: ParameterStore,
    path: Union[str, Path],
    config: Optional[Mapping[str, Any]] = None,
    extra: Optional[Mapping[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    sha = hashlib.sha256()
    for tensor_path, tensor in store.items():
        dtype, raw = _payload(tensor_path, tensor)
        entries.append(
            {
                "path": tensor_path,
                "shape": list(tensor.shape),
                "dtype": dtype,
                "frozen": store.is_frozen(tensor_path),
                "buffer": store.is_buffer(tensor_path),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        sha.update(raw)
        chunks.append(raw)
        offset += len(raw)

    header = {
        "format": "radvit-checkpoint",
        "version": FORMAT_VERSION,
        "step": store.step,
        "config": dict(config) if config else {},
        "config_digest": config_digest(config) if config else None,
        "rng_state": get_rng_state(),
        "payload_sha256": sha.hexdigest(),
        "payload_nbytes": offset,
        "tensors": entries,
        "extra": dict(extra) if extra else {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(_LEN.pack(len(header_bytes)))
        f.write(header_bytes)
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp, path)

    log.debug("Saved {} tensors (step {}) to {}", len(entries), store.step, path)
    return path


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    header, _ = _read(Path(path), payload=False)
    return header


def _read(path: Path, payload: bool = True) -> "tuple[Dict[str, Any], bytes]":
    if not path.exists():
        raise IntegrityError(f"Checkpoint not found: {path}")

    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise IntegrityError(f"{path} is not a radvit checkpoint")
        raw_len = f.read(_LEN.size)
        if len(raw_len) != _LEN.size:
            raise IntegrityError(f"{path}: truncated header")
        (header_len,) = _LEN.unpack(raw_len)
        raw_header = f.read(header_len)
        if len(raw_header) != header_len:
            raise IntegrityError(f"{path}: truncated header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise IntegrityError(f"{path}: invalid header ({e})") from e
        data = f.read() if payload else b""

    if header.get("version") != FORMAT_VERSION:
        raise IntegrityError(
            f"{path}: unsupported checkpoint version {header.get('version')}"
        )
    return header, data


def load_checkpoint(
    path: Union[str, Path], expected_config: Optional[Mapping[str, Any]] = None
) -> ParameterStore:
    """
    Load a checkpoint into a new, module-free store.

    When expected_config is given its digest must match the one recorded
    at save time.
    """

    path = Path(path)
    header, data = _read(path)

    if len(data) != header.get("payload_nbytes"):
        raise IntegrityError(
            f"{path}: payload has {len(data)} bytes, "
            f"expected {header.get('payload_nbytes')}"
        )
    if hashlib.sha256(data).hexdigest() != header.get("payload_sha256"):
        raise IntegrityError(f"{path}: payload checksum mismatch")

    if expected_config is not None:
        expected = config_digest(expected_config)
        if expected != header.get("config_digest"):
            log.error(
                "Config digest mismatch: stored {}, expected {}",
                header.get("config_digest"),
                expected,
            )
            raise ConfigError(
                f"{path} was saved with a different configuration "
                f"(stored {header.get('config', {})})"
            )

    store = ParameterStore()
    for entry in header["tensors"]:
        np_dtype, _ = _DTYPES[entry["dtype"]]
        start = entry["offset"]
        chunk = data[start : start + entry["nbytes"]]
        array = np.frombuffer(chunk, dtype=np_dtype).copy()
        tensor = torch.from_numpy(array).reshape(entry["shape"])
        store.add(entry["path"], tensor, frozen=entry["frozen"])

    store.step = int(header["step"])
    store.metadata = {
        "config": header.get("config", {}),
        "config_digest": header.get("config_digest"),
        "rng_state": header.get("rng_state"),
        "extra": header.get("extra", {}),
    }
    log.debug("Loaded {} tensors (step {}) from {}", len(store), store.step, path)
    return store
