"""Base64 array encoding used by scene files and checkpoints."""

from __future__ import annotations

import base64
import hashlib
import json

import numpy as np

_DTYPES = {"float64": "<f8", "int32": "<i4", "bool": "|b1"}


def encode_array(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        kind = "bool"
    elif np.issubdtype(arr.dtype, np.integer):
        kind = "int32"
    else:
        kind = "float64"
    raw = np.ascontiguousarray(arr.astype(_DTYPES[kind]))
    return {"dtype": kind, "shape": list(arr.shape), "data": base64.b64encode(raw.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype=_DTYPES[obj["dtype"]]).reshape(obj["shape"])
    if obj["dtype"] == "int32":
        return arr.astype(np.int64)
    return arr.astype(np.float64) if obj["dtype"] == "float64" else arr.astype(bool)


def canonical_hash(obj) -> str:
    """sha256 of the canonical JSON form (sorted keys, no whitespace)."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def round_floats(obj, ndigits: int = 6):
    if isinstance(obj, float):
        return round(obj, ndigits)
    if isinstance(obj, dict):
        return {k: round_floats(v, ndigits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, ndigits) for v in obj]
    return obj
