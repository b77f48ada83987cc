"""Wire protocol codec (mirror of the engine-side contract).

One message = single-line JSON header + "\n" + optional base64 payload of
little-endian float32 values, row-major. Responses carry "ok" and either
result fields or "error".
"""

from __future__ import annotations

import base64
import json

import numpy as np

PROTOCOL_VERSION = 1
DTYPE = "f32"


class ProtocolError(ValueError):
    pass


def encode_array(arr: np.ndarray) -> bytes:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def decode_array(data: bytes, shape) -> np.ndarray:
    raw = base64.b64decode(data, validate=True)
    n = int(np.prod(shape)) if len(shape) else 1
    if len(raw) != 4 * n:
        raise ProtocolError(f"payload holds {len(raw)} bytes, expected {4 * n}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def encode_message(header: dict, payload: np.ndarray | None = None) -> bytes:
    header = dict(header)
    header.setdefault("version", PROTOCOL_VERSION)
    if payload is not None:
        header["shape"] = list(np.shape(payload))
        header["dtype"] = DTYPE
    line = json.dumps(header, separators=(",", ":"))
    if "\n" in line:
        raise ProtocolError("header must be single-line JSON")
    body = encode_array(payload) if payload is not None else b""
    return line.encode("utf-8") + b"\n" + body


def decode_message(data: bytes):
    nl = data.find(b"\n")
    if nl < 0:
        raise ProtocolError("missing header/payload separator")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"bad header: {exc}") from exc
    if not isinstance(header, dict):
        raise ProtocolError("header must be a JSON object")
    body = data[nl + 1:]
    if not body:
        return header, None
    if header.get("dtype", DTYPE) != DTYPE:
        raise ProtocolError(f"unsupported dtype {header.get('dtype')!r}")
    shape = header.get("shape")
    if shape is None:
        raise ProtocolError("payload present but header lacks a shape")
    return header, decode_array(body, tuple(shape))
