"""Packed binary codes and Hamming-space top-K retrieval.

A row of ``d`` entries from {-1, +1} is packed into ``ceil(d / 64)``
little-endian 64-bit words; bit ``b`` of word ``w`` holds dimension
``64 * w + b``, with bit value 1 meaning +1.  Padding bits are zero.  The
inner product of two rows is then ``d - 2 * popcount(a XOR b)``, computed
word-wise without unpacking.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import CheckpointError, DataError, ShapeError

WORD_BITS = 64

CODES_MAGIC = b"BINC"
CODES_VERSION = 1


@dataclass(frozen=True)
class PackedCodes:
    """A matrix of packed ±1 codes."""

    rows: int
    dim: int
    words: np.ndarray  # (rows, words_per_row) uint64

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]

    def row(self, index: int) -> np.ndarray:
        return self.words[index]


def words_needed(dim: int) -> int:
    return (dim + WORD_BITS - 1) // WORD_BITS


def pack_codes(signs: np.ndarray) -> PackedCodes:
    """Pack a (rows, d) matrix of ±1 entries into 64-bit words."""
    signs = np.asarray(signs)
    if signs.ndim != 2:
        raise ShapeError(f"pack_codes: expected a 2-D matrix, got shape {signs.shape}")
    if not np.isin(signs, (-1, 1)).all():
        bad = signs[~np.isin(signs, (-1, 1))][0]
        raise DataError(f"pack_codes: entries must be -1 or +1, found {bad!r}")
    rows, dim = signs.shape
    wpr = words_needed(dim)
    bits = np.packbits(signs > 0, axis=1, bitorder="little")
    padded = np.zeros((rows, wpr * 8), dtype=np.uint8)
    padded[:, : bits.shape[1]] = bits
    return PackedCodes(rows=rows, dim=dim, words=padded.view("<u8"))


def unpack_codes(packed: PackedCodes) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns an int8 matrix of ±1."""
    raw = np.unpackbits(packed.words.view(np.uint8), axis=1, bitorder="little")
    return np.where(raw[:, : packed.dim] > 0, 1, -1).astype(np.int8)


def dot_binary(a: np.ndarray, b: np.ndarray, dim: int) -> int:
    """Inner product of two packed rows: ``dim - 2 * popcount(a ^ b)``."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise ShapeError(f"dot_binary: packed rows have shapes {a.shape} and {b.shape}")
    if a.ndim != 1 or len(a) != words_needed(dim):
        raise ShapeError(f"dot_binary: expected {words_needed(dim)} words for d={dim}, got shape {a.shape}")
    return int(dim - 2 * int(np.bitwise_count(a ^ b).sum(dtype=np.int64)))


def _scratch_for(codes: PackedCodes) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Reusable per-codes work buffers, word-major for contiguous scans.

    Holds a transposed copy of the words plus XOR/count/distance buffers,
    cached on the instance so repeated queries against the same codes do no
    allocation; not safe for concurrent queries against one instance.
    """
    scratch = codes.__dict__.get("_scratch")
    if scratch is None:
        planes = np.ascontiguousarray(codes.words.T)
        scratch = (
            planes,
            np.empty_like(planes),
            np.empty(planes.shape, dtype=np.uint8),
            np.empty(codes.rows, dtype=np.uint16),
        )
        object.__setattr__(codes, "_scratch", scratch)
    return scratch


def _hamming_distances(query: np.ndarray, codes: PackedCodes) -> np.ndarray:
    """Popcount of ``row XOR query`` for every code row, as uint16.

    Works one 64-bit word plane at a time so every pass is a flat scan with
    a scalar operand rather than a short-row broadcast.
    """
    planes, xor_buf, count_buf, dist = _scratch_for(codes)
    for word in range(codes.words_per_row):
        np.bitwise_xor(planes[word], query[word], out=xor_buf[word])
    np.bitwise_count(xor_buf, out=count_buf)
    # Pairs of 64-bit word counts stay below 256, so fold them in uint8
    # before widening into the uint16 totals.
    pairs = codes.words_per_row // 2
    for word in range(pairs):
        np.add(count_buf[2 * word], count_buf[2 * word + 1], out=count_buf[2 * word])
    folded = [count_buf[2 * word] for word in range(pairs)]
    if codes.words_per_row % 2:
        folded.append(count_buf[-1])
    np.copyto(dist, folded[0])
    for extra in folded[1:]:
        np.add(dist, extra, out=dist)
    return dist


def score_binary(query: np.ndarray, codes: PackedCodes, out: np.ndarray | None = None) -> np.ndarray:
    """Inner products of one packed query row against every code row."""
    query = np.asarray(query, dtype=np.uint64)
    if query.shape != (codes.words_per_row,):
        raise ShapeError(
            f"score_binary: query shape {query.shape} does not match codes with "
            f"{codes.words_per_row} words per row"
        )
    if out is None:
        out = np.empty(codes.rows, dtype=np.int64)
    dist = _hamming_distances(query, codes)
    np.copyto(out, dist, casting="unsafe")
    out *= -2
    out += codes.dim
    return out


class RankedList(NamedTuple):
    """Item indices with their integer scores, best first."""

    indices: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def select_topk(scores: np.ndarray, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties broken by ascending index.

    Uses a bounded partial selection (argpartition on ``k`` candidates plus
    an exact tie sweep); the full array is never sorted.  ``exclude`` is a
    boolean mask of positions to skip.  If fewer than ``k`` candidates
    remain, all of them are returned in order.
    """
    n = len(scores)
    if exclude is not None and exclude.shape != scores.shape:
        raise ShapeError(f"select_topk: exclude mask shape {exclude.shape} != scores shape {scores.shape}")
    work = scores.astype(np.float64, copy=True)
    n_valid = n
    if exclude is not None:
        work[exclude] = -np.inf
        n_valid = n - int(exclude.sum())
    take = min(k, n_valid)
    if take <= 0:
        return np.empty(0, dtype=np.int64)
    part = np.argpartition(work, n - take)[n - take :]
    threshold = work[part].min()
    above = np.flatnonzero(work > threshold)
    tied = np.flatnonzero(work == threshold)
    chosen = np.concatenate([above, tied[: take - len(above)]])
    return chosen[np.lexsort((chosen, -work[chosen]))]


def _select_nearest(dist: np.ndarray, dim: int, k: int, exclude: np.ndarray | None) -> np.ndarray:
    """Indices of the ``k`` smallest distances, ties broken by ascending index.

    Distances are bounded by ``dim``, so a histogram locates the cutoff
    level in one pass; only the tied level needs an index-order trim.  Same
    ordering rule as :func:`select_topk` on the corresponding scores.
    """
    n = len(dist)
    n_valid = n
    if exclude is not None:
        if exclude.shape != dist.shape:
            raise ShapeError(f"exclude mask shape {exclude.shape} != distances shape {dist.shape}")
        dist = dist.copy()
        dist[exclude] = dim + 1
        n_valid = n - int(exclude.sum())
    take = min(k, n_valid)
    if take <= 0:
        return np.empty(0, dtype=np.int64)
    level_counts = np.bincount(dist, minlength=dim + 2)
    filled = np.cumsum(level_counts[: dim + 1])
    cutoff = int(np.searchsorted(filled, take))
    below = np.flatnonzero(dist < cutoff)
    ties = np.flatnonzero(dist == cutoff)[: take - len(below)]
    chosen = np.concatenate([below, ties])
    return chosen[np.lexsort((chosen, dist[chosen]))]


def topk(
    query: np.ndarray,
    codes: PackedCodes,
    k: int,
    exclude: np.ndarray | None = None,
) -> RankedList:
    """Top-``k`` items for one packed query row, best (then lowest index) first."""
    if k < 0:
        raise DataError(f"topk: k must be >= 0, got {k}")
    query = np.asarray(query, dtype=np.uint64)
    if query.shape != (codes.words_per_row,):
        raise ShapeError(
            f"topk: query shape {query.shape} does not match codes with "
            f"{codes.words_per_row} words per row"
        )
    dist = _hamming_distances(query, codes)
    order = _select_nearest(dist, codes.dim, k, exclude)
    scores = codes.dim - 2 * dist[order].astype(np.int64)
    return RankedList(indices=order, scores=scores)


# ---------------------------------------------------------------------------
# packed-code file format
# ---------------------------------------------------------------------------


def save_codes(path: Path | str, codes: PackedCodes) -> None:
    """Write ``BINC``: magic, version, rows, d, words-per-row, then words."""
    with Path(path).open("wb") as fh:
        fh.write(CODES_MAGIC)
        fh.write(struct.pack("<IIII", CODES_VERSION, codes.rows, codes.dim, codes.words_per_row))
        fh.write(np.ascontiguousarray(codes.words, dtype="<u8").tobytes())


def load_codes(path: Path | str) -> PackedCodes:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"code file not found: {path}")
    with path.open("rb") as fh:
        magic = fh.read(len(CODES_MAGIC))
        if magic != CODES_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}; not a packed-code file")
        head = fh.read(16)
        if len(head) != 16:
            raise CheckpointError(f"{path}: truncated header")
        version, rows, dim, wpr = struct.unpack("<IIII", head)
        if version != CODES_VERSION:
            raise CheckpointError(
                f"{path}: code file version {version} is not supported (this build reads "
                f"version {CODES_VERSION}); re-export the codes with a matching build"
            )
        if wpr != words_needed(dim):
            raise CheckpointError(f"{path}: {wpr} words per row does not match d={dim}")
        data = fh.read(8 * rows * wpr)
        if len(data) != 8 * rows * wpr:
            raise CheckpointError(f"{path}: truncated code words")
    words = np.frombuffer(data, dtype="<u8").reshape(rows, wpr).copy()
    return PackedCodes(rows=rows, dim=dim, words=words)


# ---------------------------------------------------------------------------
# throughput benchmark
# ---------------------------------------------------------------------------


def bench(
    user_codes: PackedCodes,
    item_codes: PackedCodes,
    k: int,
    repetitions: int,
    max_queries: int = 256,
) -> dict:
    """Compare packed retrieval against a dense float32 dot-product baseline.

    Both paths score every item for each query user and run the same
    top-``k`` selection; the dense path uses float32 matrices holding the
    same ±1 values.  Returns a report dict; ``repetitions == 0`` yields
    ``valid=False`` with zero throughput instead of a division by zero.
    """
    if user_codes.dim != item_codes.dim:
        raise ShapeError(f"bench: user codes have d={user_codes.dim} but item codes d={item_codes.dim}")
    report = {
        "d": user_codes.dim,
        "n_items": item_codes.rows,
        "n_queries": 0,
        "k": k,
        "repetitions": repetitions,
        "qps_binary": 0.0,
        "qps_dense": 0.0,
        "speedup": 0.0,
        "valid": repetitions > 0,
    }
    if repetitions <= 0:
        return report

    queries = range(min(user_codes.rows, max_queries))
    report["n_queries"] = len(queries)
    dense_users = unpack_codes(user_codes).astype(np.float32)
    dense_items = unpack_codes(item_codes).astype(np.float32)

    def run_binary() -> None:
        for q in queries:
            topk(user_codes.words[q], item_codes, k)

    def run_dense() -> None:
        for q in queries:
            scores = dense_items @ dense_users[q]
            select_topk(scores, k)

    run_binary()  # warm-up both paths before timing
    run_dense()

    t0 = time.perf_counter()
    for _ in range(repetitions):
        run_binary()
    t1 = time.perf_counter()
    for _ in range(repetitions):
        run_dense()
    t2 = time.perf_counter()

    total = repetitions * len(queries)
    report["qps_binary"] = total / max(t1 - t0, 1e-12)
    report["qps_dense"] = total / max(t2 - t1, 1e-12)
    report["speedup"] = report["qps_binary"] / max(report["qps_dense"], 1e-12)
    return report
