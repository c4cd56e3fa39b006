"""Versioned binary container for trained EASE / BPRMF models.

Layout (little-endian)::

    8 bytes   magic b"RECMEM\\x00\\x01"
    u16       format version
    u32       header length H
    H bytes   UTF-8 JSON header: model kind, hyperparameters, and one
              {name, dtype, shape} entry per array, in payload order
    ...       each array's row-major payload, back to back
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .bpr import BPRMF
from .ease import EASE

MAGIC = b"RECMEM\x00\x01"
VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class ModelFormatError(ValueError):
    pass


def _arrays(model, item_ids, user_ids) -> dict[str, np.ndarray]:
    if isinstance(model, EASE):
        arrays = {"B": model.B}
    elif isinstance(model, BPRMF):
        arrays = {"user_factors": model.user_factors, "item_factors": model.item_factors, "item_bias": model.item_bias}
    else:
        raise TypeError(f"cannot persist {type(model).__name__}")
    arrays["item_ids"] = np.asarray(item_ids, dtype=np.int64)
    if user_ids is not None:
        arrays["user_ids"] = np.asarray(user_ids, dtype=np.int64)
    return arrays


def save_model(model, path: str | Path, item_ids, user_ids=None) -> None:
    arrays = _arrays(model, item_ids, user_ids)
    hyper = {"lam": model.lam} if isinstance(model, EASE) else model.hyperparams()
    entries, payload = [], []
    for name, arr in arrays.items():
        code = "i8" if arr.dtype.kind in "iu" else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        entries.append({"name": name, "dtype": code, "shape": list(data.shape)})
        payload.append(data.tobytes(order="C"))
    header = json.dumps({"kind": model.name, "hyperparams": hyper, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(header)))
        fh.write(header)
        for chunk in payload:
            fh.write(chunk)


def load_model(path: str | Path):
    """Returns ``(model, arrays)``; ``arrays`` also carries the id maps."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: bad magic bytes")
    version, hlen = struct.unpack_from("<HI", blob, len(MAGIC))
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    off = len(MAGIC) + 6
    header = json.loads(blob[off : off + hlen])
    off += hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * dtype.itemsize
        if off + size > len(blob):
            raise ModelFormatError(f"{path}: truncated payload for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape).copy()
        off += size
    if off != len(blob):
        raise ModelFormatError(f"{path}: {len(blob) - off} trailing bytes")
    kind = header["kind"]
    if kind == "ease":
        model = EASE(**header["hyperparams"])
        model.B = arrays["B"]
    elif kind == "bprmf":
        model = BPRMF(**header["hyperparams"])
        model.user_factors = arrays["user_factors"]
        model.item_factors = arrays["item_factors"]
        model.item_bias = arrays["item_bias"]
    else:
        raise ModelFormatError(f"{path}: unknown model kind {kind!r}")
    return model, arrays
