"""Lossless, versioned, checksummed model container.

File layout (all UTF-8):

    line 1: "bsforest-model <format_version>"
    line 2: sha256 hex digest of the payload line
    line 3: canonical JSON payload

Floats are stored as C99 hex literals and arrays as base64 of their
little-endian bytes, so a round trip is bit-exact and identical models
serialize to identical bytes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math

import numpy as np

from .core import ModelFormatError

MAGIC = "bsforest-model"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"float64", "int64", "int32", "int8", "uint8"}


def fhex(x: float) -> str:
    return float(x).hex()


def funhex(s: str) -> float:
    try:
        return float.fromhex(s)
    except (ValueError, TypeError):
        raise ModelFormatError(f"bad float field {s!r}") from None


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    dtype = str(a.dtype)
    if dtype not in _ALLOWED_DTYPES:
        raise ModelFormatError(f"refusing to encode dtype {dtype}")
    little = a.astype(a.dtype.newbyteorder("<"), copy=False)
    return {
        "dtype": dtype,
        "shape": list(a.shape),
        "b64": base64.b64encode(little.tobytes()).decode("ascii"),
    }


def decode_array(obj) -> np.ndarray:
    try:
        dtype = obj["dtype"]
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["b64"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad array field: {exc}") from None
    if dtype not in _ALLOWED_DTYPES:
        raise ModelFormatError(f"unsupported array dtype {dtype}")
    expected = math.prod(shape) * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise ModelFormatError("array byte length does not match its shape")
    arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
    return np.ascontiguousarray(arr.reshape(shape))


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_model(path, payload: dict) -> None:
    body = canonical_dumps(payload)
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION}\n{digest}\n{body}\n")


def read_model(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        content = fh.read()
    lines = content.split("\n")
    if len(lines) < 3:
        raise ModelFormatError(f"{path}: truncated or corrupt model file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != MAGIC:
        raise ModelFormatError(f"{path}: not a {MAGIC} file")
    try:
        version = int(header[1])
    except ValueError:
        raise ModelFormatError(f"{path}: corrupt version field {header[1]!r}") from None
    if version != FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: model format version {version} is not supported; "
            f"this build reads version {FORMAT_VERSION}"
        )
    digest, body = lines[1], lines[2]
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != digest:
        raise ModelFormatError(f"{path}: checksum mismatch, file is corrupt")
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: corrupt payload: {exc}") from None
