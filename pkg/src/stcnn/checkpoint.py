"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    magic        8 bytes   b"STCNNCKP"
    version      uint32    1
    config_len   uint32    byte length of the config text
    config       utf-8     "key = value" lines (model kind and hyperparameters)
    n_tensors    uint32
    shape table  n_tensors entries of
                   name_len uint16, name utf-8, ndim uint8, ndim x uint32 extents
    payload      float64 values of every tensor, row-major, in table order
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .volume import FormatError, parse_keyvalue

MAGIC = b"STCNNCKP"
VERSION = 1


def encode(config: dict, params: dict[str, np.ndarray]) -> bytes:
    text = "".join(f"{k} = {v}\n" for k, v in config.items()).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in params.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise FormatError("not an stcnn checkpoint (bad magic)")
    version, clen = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos = 16
    config = parse_keyvalue(blob[pos:pos + clen].decode("utf-8"))
    pos += clen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        table.append((name, shape))
    params = {}
    for name, shape in table:
        n = int(np.prod(shape))
        if pos + 8 * n > len(blob):
            raise FormatError(f"checkpoint payload truncated at tensor {name!r}")
        params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(blob):
        raise FormatError(f"checkpoint has {len(blob) - pos} trailing bytes")
    return config, params


def save(path, config: dict, params: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(config, params))


def load(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
