"""Parameter checkpoint serialization.

Layout: the magic line ``KIND-CKPT-1``, a 4-byte little-endian header length,
a JSON header describing metadata and the parameter table (name, shape, in
file order), then the raw float64 little-endian values concatenated in table
order. Writing the same parameters twice produces byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"KIND-CKPT-1\n"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "meta": meta or {},
        "params": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=False).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ContractError(f"{path}: not a KIND-CKPT-1 checkpoint")
    offset = len(MAGIC)
    header_len = int.from_bytes(raw[offset:offset + 4], "little")
    offset += 4
    header = json.loads(raw[offset:offset + header_len])
    offset += header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        arrays[entry["name"]] = values.reshape(shape).astype(np.float64)
    if offset != len(raw):
        raise ContractError(f"{path}: trailing bytes after parameter data")
    return header["meta"], arrays
