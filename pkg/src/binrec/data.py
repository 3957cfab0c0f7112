"""Implicit-feedback dataset handling.

Covers parsing of raw ratings, minimum-degree filtering, deterministic
per-user train/test splits, bipartite graph construction with its
symmetrically normalized adjacency, and per-epoch sampling of ranking
triples.  All user/item bookkeeping happens through dense integer indices;
the original string keys survive in the graph for reporting.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sparse

from .errors import DataError, ParseError

log = logging.getLogger(__name__)


class Interaction(NamedTuple):
    user_id: str
    item_id: str


class BprTriple(NamedTuple):
    user: int
    pos_item: int
    neg_item: int


class BprEpoch(NamedTuple):
    """One epoch of ranking triples in flat array form."""

    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


# ---------------------------------------------------------------------------
# parsing and filtering
# ---------------------------------------------------------------------------

FORMATS = ("movielens", "tsv")


def parse_ratings(lines: Iterable[str], fmt: str = "movielens") -> list[Interaction]:
    """Parse rating lines into deduplicated (user, item) interactions.

    Args:
        lines: text lines; blank lines are ignored.
        fmt: "movielens" for ``user::item::rating::timestamp`` or "tsv"
            for tab-separated ``user item [rating [timestamp]]``.

    Returns:
        Interactions in first-appearance order, duplicates (same user and
        item) dropped.  Rating values are not thresholded: every rating
        counts as positive feedback.

    Raises:
        ParseError: on any line that does not match the format, citing the
            1-based line number.
    """
    if fmt not in FORMATS:
        raise DataError(f"unknown ratings format {fmt!r}; expected one of {FORMATS}")
    sep, min_fields = ("::", 4) if fmt == "movielens" else ("\t", 2)
    seen: dict[Interaction, None] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        parts = line.split(sep)
        if len(parts) < min_fields or not parts[0].strip() or not parts[1].strip():
            raise ParseError(f"line {lineno}: cannot parse {fmt} record: {line!r}")
        if fmt == "movielens" and len(parts) != 4:
            raise ParseError(f"line {lineno}: expected 4 '::'-separated fields, got {len(parts)}: {line!r}")
        seen.setdefault(Interaction(parts[0].strip(), parts[1].strip()))
    return list(seen)


def filter_min_degree(
    interactions: Sequence[Interaction],
    min_user: int = 20,
    min_item: int = 20,
) -> list[Interaction]:
    """Drop cold users, then cold items, in one pass each.

    Users with fewer than ``min_user`` interactions are removed first; item
    counts are then recomputed over the surviving interactions and items
    below ``min_item`` are removed.  The filter is deliberately not iterated
    to a fixed point, so users may end up below the threshold again after
    item removal.
    """
    user_counts = Counter(i.user_id for i in interactions)
    kept = [i for i in interactions if user_counts[i.user_id] >= min_user]
    item_counts = Counter(i.item_id for i in kept)
    return [i for i in kept if item_counts[i.item_id] >= min_item]


def subsample_users(
    interactions: Sequence[Interaction],
    fraction: float,
    seed: int,
) -> list[Interaction]:
    """Keep all interactions of a uniform random fraction of users."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"subsample fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(interactions)
    users = sorted({i.user_id for i in interactions})
    rng = np.random.default_rng(seed)
    n_keep = max(1, int(round(fraction * len(users))))
    keep = set(np.asarray(users, dtype=object)[rng.permutation(len(users))[:n_keep]])
    return [i for i in interactions if i.user_id in keep]


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


@dataclass
class BipartiteGraph:
    """User-item interaction graph with dense indices.

    ``user_positives[u]`` is the sorted array of item indices user ``u``
    interacted with.  ``user_keys``/``item_keys`` map indices back to the
    original identifiers.
    """

    num_users: int
    num_items: int
    user_positives: list[np.ndarray]
    user_keys: list[str]
    item_keys: list[str]
    user_index: dict[str, int]
    item_index: dict[str, int]

    @property
    def num_interactions(self) -> int:
        return sum(len(p) for p in self.user_positives)

    def positives_mask(self, user: int) -> np.ndarray:
        mask = np.zeros(self.num_items, dtype=bool)
        mask[self.user_positives[user]] = True
        return mask


def build_graph(interactions: Sequence[Interaction]) -> BipartiteGraph:
    """Index users/items in first-appearance order and bucket positives."""
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: list[list[int]] = []
    for user_id, item_id in interactions:
        u = user_index.setdefault(user_id, len(user_index))
        if u == len(per_user):
            per_user.append([])
        i = item_index.setdefault(item_id, len(item_index))
        per_user[u].append(i)
    return BipartiteGraph(
        num_users=len(user_index),
        num_items=len(item_index),
        user_positives=[np.unique(np.asarray(items, dtype=np.int64)) for items in per_user],
        user_keys=list(user_index),
        item_keys=list(item_index),
        user_index=user_index,
        item_index=item_index,
    )


@dataclass
class SplitDataset:
    """A train graph plus held-out positives over the same index space."""

    train: BipartiteGraph
    test_positives: list[np.ndarray]
    split_seed: int


def split_per_user(
    interactions: Sequence[Interaction],
    ratio: float = 0.5,
    seed: int = 0,
) -> SplitDataset:
    """Randomly split each user's items into train/test at ``ratio``.

    Every user contributes ``ceil(ratio * n)`` training items chosen
    uniformly at random; the rest are held out.  Users are processed in
    index order under one seeded generator, so the split is a pure function
    of (interactions, ratio, seed).

    Raises:
        DataError: if any user has fewer than two interactions (nothing to
            hold out), naming the user.
    """
    if not 0.0 < ratio <= 1.0:
        raise DataError(f"split ratio must be in (0, 1], got {ratio}")
    full = build_graph(interactions)
    rng = np.random.default_rng(seed)
    train_pos: list[np.ndarray] = []
    test_pos: list[np.ndarray] = []
    for u in range(full.num_users):
        items = full.user_positives[u]
        n = len(items)
        if n < 2:
            raise DataError(
                f"user {full.user_keys[u]!r} has {n} interaction(s); need at least 2 to split "
                f"(filter harder or drop the user)"
            )
        n_train = math.ceil(ratio * n)
        perm = rng.permutation(n)
        train_pos.append(np.sort(items[perm[:n_train]]))
        test_pos.append(np.sort(items[perm[n_train:]]))
    train_graph = BipartiteGraph(
        num_users=full.num_users,
        num_items=full.num_items,
        user_positives=train_pos,
        user_keys=full.user_keys,
        item_keys=full.item_keys,
        user_index=full.user_index,
        item_index=full.item_index,
    )
    return SplitDataset(train=train_graph, test_positives=test_pos, split_seed=seed)


def build_laplacian(graph: BipartiteGraph) -> sparse.csr_matrix:
    """Symmetrically normalized adjacency of the joint user+item vertex set.

    Users occupy rows ``0..num_users-1`` and items the following
    ``num_items`` rows.  Each edge (u, i) contributes
    ``1 / sqrt(deg(u) * deg(i))`` at both symmetric positions; vertices with
    no edges keep all-zero rows and columns.
    """
    m, n = graph.num_users, graph.num_items
    if m + n == 0:
        raise DataError("cannot build a propagation matrix for an empty graph")
    users = np.repeat(
        np.arange(m, dtype=np.int64),
        [len(p) for p in graph.user_positives],
    )
    items = (
        np.concatenate(graph.user_positives)
        if graph.user_positives
        else np.empty(0, dtype=np.int64)
    ) + m
    degree = np.bincount(np.concatenate([users, items]), minlength=m + n).astype(np.float64)
    inv_sqrt = np.zeros(m + n)
    np.divide(1.0, np.sqrt(degree), out=inv_sqrt, where=degree > 0)
    weights = inv_sqrt[users] * inv_sqrt[items]
    lap = sparse.csr_matrix(
        (
            np.concatenate([weights, weights]),
            (np.concatenate([users, items]), np.concatenate([items, users])),
        ),
        shape=(m + n, m + n),
    )
    lap.sort_indices()
    return lap


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def sample_negatives(
    rng: np.random.Generator,
    positives: np.ndarray,
    count: int,
    num_items: int,
) -> np.ndarray:
    """Draw ``count`` items uniformly from the complement of ``positives``.

    Sampling is with replacement; ``positives`` must be sorted.
    """
    draws = rng.integers(0, num_items, size=count)
    bad = np.isin(draws, positives)
    while bad.any():
        draws[bad] = rng.integers(0, num_items, size=int(bad.sum()))
        bad = np.isin(draws, positives)
    return draws


def sample_negatives_without_replacement(
    rng: np.random.Generator,
    positives: np.ndarray,
    count: int,
    num_items: int,
) -> np.ndarray:
    """Draw ``count`` distinct items from the complement of ``positives``."""
    pool = num_items - len(positives)
    if count > pool:
        raise DataError(f"cannot draw {count} distinct negatives from a pool of {pool}")
    # Rejection sampling is cheap while the complement is large; fall back
    # to an explicit complement when it is not.
    if count * 2 > pool:
        complement = np.setdiff1d(np.arange(num_items, dtype=np.int64), positives)
        return np.sort(rng.choice(complement, size=count, replace=False))
    chosen = np.empty(0, dtype=np.int64)
    while len(chosen) < count:
        draws = rng.integers(0, num_items, size=2 * (count - len(chosen)) + 8)
        draws = draws[~np.isin(draws, positives)]
        chosen = np.unique(np.concatenate([chosen, draws]))
    return np.sort(rng.permutation(chosen)[:count])


def sample_bpr_epoch(graph: BipartiteGraph, seed_or_rng) -> BprEpoch:
    """Sample one ranking triple per training positive.

    For every (user, positive item) pair one negative is drawn uniformly
    from the user's non-interacted items, with replacement across pairs.
    Users who interacted with every item cannot yield negatives and are
    skipped with a warning.
    """
    rng = _as_rng(seed_or_rng)
    users: list[np.ndarray] = []
    pos: list[np.ndarray] = []
    neg: list[np.ndarray] = []
    for u in range(graph.num_users):
        positives = graph.user_positives[u]
        n = len(positives)
        if n == 0:
            continue
        if n == graph.num_items:
            log.warning("user %s interacted with every item; skipping in ranking loss", graph.user_keys[u])
            continue
        users.append(np.full(n, u, dtype=np.int64))
        pos.append(positives)
        neg.append(sample_negatives(rng, positives, n, graph.num_items))
    if not users:
        return BprEpoch(
            np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        )
    return BprEpoch(np.concatenate(users), np.concatenate(pos), np.concatenate(neg))


# ---------------------------------------------------------------------------
# on-disk split layout
# ---------------------------------------------------------------------------

USERS_FILE = "users.tsv"
ITEMS_FILE = "items.tsv"
TRAIN_FILE = "train.tsv"
TEST_FILE = "test.tsv"
META_FILE = "meta.kv"


def write_split(split: SplitDataset, out_dir: Path | str, meta: dict | None = None) -> None:
    """Materialize a split as sorted TSV files plus a key=value meta file."""
    from .config import write_kv  # local import to avoid a cycle

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = split.train

    def dump_keys(path: Path, keys: list[str]) -> None:
        path.write_text("".join(f"{key}\t{idx}\n" for idx, key in enumerate(keys)))

    def dump_pairs(path: Path, positives: list[np.ndarray]) -> None:
        with path.open("w") as fh:
            for u, items in enumerate(positives):
                for i in items:
                    fh.write(f"{u}\t{i}\n")

    dump_keys(out / USERS_FILE, graph.user_keys)
    dump_keys(out / ITEMS_FILE, graph.item_keys)
    dump_pairs(out / TRAIN_FILE, graph.user_positives)
    dump_pairs(out / TEST_FILE, split.test_positives)
    record = {
        "M": graph.num_users,
        "N": graph.num_items,
        "seed": split.split_seed,
        "train": graph.num_interactions,
        "test": sum(len(t) for t in split.test_positives),
    }
    record.update(meta or {})
    write_kv(out / META_FILE, record)


def load_split(in_dir: Path | str) -> tuple[SplitDataset, dict[str, str]]:
    """Load a split written by :func:`write_split`."""
    from .config import read_kv

    src = Path(in_dir)
    for name in (USERS_FILE, ITEMS_FILE, TRAIN_FILE, TEST_FILE, META_FILE):
        if not (src / name).exists():
            raise DataError(f"prepared dataset is missing {src / name}")
    meta = read_kv(src / META_FILE)

    def read_keys(path: Path) -> list[str]:
        keys: list[str] = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 2 or int(parts[1]) != lineno - 1:
                raise DataError(f"{path}: bad index line {lineno}: {line!r}")
            keys.append(parts[0])
        return keys

    def read_pairs(path: Path, num_users: int) -> list[np.ndarray]:
        per_user: list[list[int]] = [[] for _ in range(num_users)]
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            try:
                u_text, i_text = line.split("\t")
                per_user[int(u_text)].append(int(i_text))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}: bad pair at line {lineno}: {line!r}") from exc
        return [np.unique(np.asarray(items, dtype=np.int64)) for items in per_user]

    user_keys = read_keys(src / USERS_FILE)
    item_keys = read_keys(src / ITEMS_FILE)
    num_users, num_items = int(meta["M"]), int(meta["N"])
    if len(user_keys) != num_users or len(item_keys) != num_items:
        raise DataError(
            f"{src}: meta counts (M={num_users}, N={num_items}) disagree with key files "
            f"({len(user_keys)} users, {len(item_keys)} items)"
        )
    graph = BipartiteGraph(
        num_users=num_users,
        num_items=num_items,
        user_positives=read_pairs(src / TRAIN_FILE, num_users),
        user_keys=user_keys,
        item_keys=item_keys,
        user_index={k: i for i, k in enumerate(user_keys)},
        item_index={k: i for i, k in enumerate(item_keys)},
    )
    split = SplitDataset(
        train=graph,
        test_positives=read_pairs(src / TEST_FILE, num_users),
        split_seed=int(meta["seed"]),
    )
    return split, meta
