"""Binary container for checkpoints and debug dumps.

Layout (all integers little-endian)::

    8 bytes   magic  b"SRICKPT\\0"
    4 bytes   format version (uint32)
    8 bytes   header length N (uint64)
    N bytes   UTF-8 JSON header: {"meta": ..., "arrays": [{name, shape, offset}]}
    ...       raw float64 little-endian array data, concatenated
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SRICKPT\0"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def write_container(path, meta, arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "arrays": entries}, sort_keys=True
    ).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def read_container(path):
    """Returns (meta, {name: float64 array})."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    (hlen,) = struct.unpack("<Q", raw[12:20])
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = base + e["offset"]
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape)
        arrays[e["name"]] = a.astype(np.float64)
    return header["meta"], arrays


def save_chains(path, record, meta=None):
    """Dump a ChainRecord for debugging."""
    arrays = {"z0": record.z0, "noise": record.noise, "zK": record.zK,
              "divergent": record.divergent.astype(np.float64)}
    if record.jacobian is not None:
        arrays["jacobian"] = record.jacobian
        arrays["log_q"] = record.log_q
    write_container(path, {"kind": "chains", **(meta or {})}, arrays)


def load_chains(path):
    from .sri import ChainRecord

    _, a = read_container(path)
    return ChainRecord(
        z0=a["z0"], noise=a["noise"], zK=a["zK"], divergent=a["divergent"].astype(bool),
        jacobian=a.get("jacobian"), log_q=a.get("log_q"),
    )
