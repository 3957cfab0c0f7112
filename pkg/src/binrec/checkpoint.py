"""Binary checkpoint container.

One container file holds a fixed header followed by a sequence of float32
matrices::

    magic   4 bytes  b"DGCB"
    version uint32   little-endian
    M, N, D uint32   user count, item count, base embedding width
    act     uint8    activation tag
    arrays  repeated: rows uint32, cols uint32, rows*cols float32 (row-major)

All integers and floats are little-endian.  Arrays are written and read in
a fixed order defined by the producing module, so a round trip is
bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import CheckpointError

MAGIC = b"DGCB"
VERSION = 1

ACTIVATION_TAGS = {"identity": 0, "sigmoid": 1, "tanh": 2}
TAG_ACTIVATIONS = {tag: name for name, tag in ACTIVATION_TAGS.items()}


@dataclass
class Container:
    num_users: int
    num_items: int
    dim: int
    activation: str
    arrays: list[np.ndarray]


def _write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    if arr.ndim != 2:
        raise CheckpointError(f"checkpoint arrays must be 2-D, got shape {arr.shape}")
    rows, cols = arr.shape
    fh.write(struct.pack("<II", rows, cols))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh: BinaryIO, size: int, what: str) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise CheckpointError(f"checkpoint is truncated while reading {what}")
    return buf


def save_container(
    path: Path | str,
    *,
    num_users: int,
    num_items: int,
    dim: int,
    activation: str,
    arrays: list[np.ndarray],
) -> None:
    if activation not in ACTIVATION_TAGS:
        raise CheckpointError(f"unknown activation {activation!r}")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIIB", VERSION, num_users, num_items, dim, ACTIVATION_TAGS[activation]))
        for arr in arrays:
            _write_array(fh, arr)


def load_container(path: Path | str, expect_arrays: int | None = None) -> Container:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file not found: {path}")
    with path.open("rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}; not a checkpoint file")
        version, num_users, num_items, dim, tag = struct.unpack(
            "<IIIIB", _read_exact(fh, 17, "header")
        )
        if version != VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version} is not supported (this build reads "
                f"version {VERSION}); re-export the checkpoint with a matching build"
            )
        if tag not in TAG_ACTIVATIONS:
            raise CheckpointError(f"{path}: unknown activation tag {tag}")
        arrays: list[np.ndarray] = []
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise CheckpointError(f"{path}: truncated array header")
            rows, cols = struct.unpack("<II", head)
            data = _read_exact(fh, 4 * rows * cols, f"array {len(arrays)} ({rows}x{cols})")
            arrays.append(np.frombuffer(data, dtype="<f4").reshape(rows, cols).astype(np.float32))
    if expect_arrays is not None and len(arrays) != expect_arrays:
        raise CheckpointError(
            f"{path}: expected {expect_arrays} arrays but found {len(arrays)}; "
            f"this file was probably produced by a different command"
        )
    return Container(
        num_users=num_users,
        num_items=num_items,
        dim=dim,
        activation=TAG_ACTIVATIONS[tag],
        arrays=arrays,
    )
