"""Bit-exact embedding checkpoints.

Layout: magic b"TDCK1\n", then little-endian u32 num_users / num_items /
dim, then the user table followed by the item table as little-endian
float32 row-major, then a u64 FNV-1a checksum of everything between the
magic and the checksum.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .util import fnv1a64

MAGIC = b"TDCK1\n"
_HEADER = struct.Struct("<III")


class CheckpointError(Exception):
    pass


class Checkpoint(NamedTuple):
    num_users: int
    num_items: int
    dim: int
    user_table: np.ndarray  # float64 copies of the stored float32 payload
    item_table: np.ndarray


def save_checkpoint(path: str | Path, user_table: np.ndarray, item_table: np.ndarray) -> None:
    if user_table.ndim != 2 or item_table.ndim != 2 or user_table.shape[1] != item_table.shape[1]:
        raise CheckpointError("tables must be 2-D with matching dims")
    num_users, dim = user_table.shape
    num_items = item_table.shape[0]
    payload = (
        _HEADER.pack(num_users, num_items, dim)
        + np.ascontiguousarray(user_table, dtype="<f4").tobytes()
        + np.ascontiguousarray(item_table, dtype="<f4").tobytes()
    )
    digest = fnv1a64(payload)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<Q", digest))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    if len(blob) < len(MAGIC) + _HEADER.size + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    payload, (stored,) = blob[len(MAGIC) : -8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(payload) != stored:
        raise CheckpointError(f"{path}: checksum mismatch")
    num_users, num_items, dim = _HEADER.unpack_from(payload)
    expected = _HEADER.size + 4 * dim * (num_users + num_items)
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload length {len(payload)} != {expected}")
    flat = np.frombuffer(payload, dtype="<f4", offset=_HEADER.size)
    user = flat[: num_users * dim].reshape(num_users, dim).astype(np.float64)
    item = flat[num_users * dim :].reshape(num_items, dim).astype(np.float64)
    return Checkpoint(num_users, num_items, dim, user, item)
