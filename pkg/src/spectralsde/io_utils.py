"""Decimal-string float encoding for bit-exact JSON round-trips.

All persisted numbers (dynamics, datasets) are written as decimal strings
with 17 significant digits, which is enough to reproduce any IEEE-754
double exactly on parse.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def fmt_float(x: float) -> str:
    """Format a double as a 17-significant-digit decimal string."""
    return format(float(x), ".17g")


def parse_float(s) -> float:
    return float(s)


def encode_array(a) -> list:
    """Encode a numpy array (any rank) as nested lists of decimal strings."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return fmt_float(float(a))
    return [encode_array(row) for row in a]


def decode_array(obj) -> np.ndarray:
    """Inverse of :func:`encode_array`."""
    if isinstance(obj, (str, int, float)):
        return np.asarray(parse_float(obj))
    return np.asarray([decode_array(x) for x in obj], dtype=float)


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_obj(obj) -> str:
    """Hash of the canonical JSON encoding of a python object."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
