"""Binary checkpoint container.

Layout::

    BLOBSENSE-CKPT <version>\\n
    <header byte length>\\n
    <UTF-8 JSON header>\\n
    <raw little-endian float32 payload>

The header carries arbitrary metadata plus a ``tensors`` manifest of
``{"name", "shape", "offset"}`` entries, where ``offset`` is the byte offset
of the tensor inside the payload.  Tensor names are namespaced by section
(``model/...``, ``adam.m/...``, ``adam.v/...``).
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import ValidationError

MAGIC = "BLOBSENSE-CKPT"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def write_container(path, header: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    """Write ``arrays`` (in the given order) with ``header`` metadata, atomically."""
    manifest, offset = [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    full = dict(header)
    full["tensors"] = manifest
    full["payload_bytes"] = offset
    head = json.dumps(full, indent=1, sort_keys=True).encode("utf-8")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION}\n{len(head)}\n".encode("ascii"))
        fh.write(head)
        fh.write(b"\n")
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    os.replace(tmp, path)


def read_container(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        magic_end = raw.index(b"\n")
        magic, version = raw[:magic_end].decode("ascii").split(" ")
        len_end = raw.index(b"\n", magic_end + 1)
        head_len = int(raw[magic_end + 1:len_end])
        start = len_end + 1
        header = json.loads(raw[start:start + head_len].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: unreadable checkpoint header ({exc})") from None
    if magic != MAGIC or int(version) != VERSION:
        raise ValidationError(f"{path}: not a version-{VERSION} checkpoint")
    payload = raw[start + head_len + 1:]
    if len(payload) != header.get("payload_bytes"):
        raise ValidationError(f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")

    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        off = entry["offset"]
        if off + 4 * n > len(payload):
            raise ValidationError(f"{path}: tensor {entry['name']} overruns the payload")
        arrays[entry["name"]] = np.frombuffer(payload, dtype=_LE_F32, count=n, offset=off).astype(np.float32).reshape(shape)
    return header, arrays
