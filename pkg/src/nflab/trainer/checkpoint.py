"""Single-file checkpoints: JSON header plus raw tensor payload.

Layout: 4-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header, then the tensor bytes back to back. The header records
each tensor's dtype string, shape, and offset, arbitrary JSON metadata,
and a SHA-256 of the payload that is verified on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from ..errors import (CheckpointChecksumError, CheckpointError,
                      CheckpointVersionError)

MAGIC = b"NFLB"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors: Dict[str, np.ndarray],
                    meta: dict) -> None:
    """Write atomically: the target file is replaced only when complete."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        shape = list(arr.shape)  # ascontiguousarray turns 0-d into 1-d
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str,
                        "shape": shape, "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "tensors": entries,
        "meta": meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    os.replace(tmp, path)


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {version} unsupported; this build reads "
            f"{FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    payload = blob[header_end:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise CheckpointChecksumError(
            "checkpoint payload does not match its recorded SHA-256")
    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        stop = start + entry["nbytes"]
        arr = np.frombuffer(payload[start:stop],
                            dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, header["meta"]
