"""Checkpoint file format.

Little-endian binary: magic ``SMTK``, version u32, entry count u32, then a
directory of (name, dtype, shape, byte-offset) records followed by the raw
array payload.  Names mirror module/parameter paths; entries are written in
sorted name order so identical parameter sets serialize byte-identically.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"SMTK"
VERSION = 1


def save_params(path, params: dict[str, np.ndarray]) -> None:
    names = sorted(params)
    directory = bytearray()
    payload = bytearray()
    for name in names:
        arr = np.ascontiguousarray(params[name])
        dtype = arr.dtype.newbyteorder("<").str.encode("ascii")
        name_b = name.encode("utf-8")
        directory += struct.pack("<H", len(name_b)) + name_b
        directory += struct.pack("<B", len(dtype)) + dtype
        directory += struct.pack("<B", arr.ndim)
        directory += struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<Q", len(payload))
        payload += arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    header = MAGIC + struct.pack("<II", VERSION, len(names))
    Path(path).write_bytes(header + bytes(directory) + bytes(payload))


def load_params(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (dlen,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dtype = np.dtype(blob[pos:pos + dlen].decode("ascii"))
        pos += dlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        entries.append((name, dtype, shape, offset))
    params = {}
    for name, dtype, shape, offset in entries:
        start = pos + offset
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob[start:start + nbytes], dtype=dtype)
        params[name] = arr.reshape(shape).copy()
    return params


def restore_into(params: dict[str, np.ndarray],
                 loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into an existing parameter dict, validating names
    and shapes against the target model."""
    missing = sorted(set(params) - set(loaded))
    extra = sorted(set(loaded) - set(params))
    if missing or extra:
        raise ContractError(
            f"checkpoint does not match the model (missing {missing[:3]}, "
            f"unexpected {extra[:3]})")
    for name, arr in params.items():
        if loaded[name].shape != arr.shape:
            raise ContractError(
                f"{name}: checkpoint shape {loaded[name].shape} != model "
                f"shape {arr.shape}")
        arr[...] = loaded[name].astype(arr.dtype)
