"""Implicit-feedback data pipeline: ingestion, filtering, splits, batches.

Input files are UTF-8 text with one interaction per line,
``user_id<ws>item_id [ignored extra fields]``; lines starting with ``#``
are skipped. Ids are remapped to dense indices in first-seen order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


class DataError(Exception):
    """Malformed or unusable interaction data."""


@dataclass
class InteractionLog:
    num_users: int
    num_items: int
    users: np.ndarray  # int64, one entry per interaction
    items: np.ndarray
    user_id_map: dict = field(default_factory=dict)
    item_id_map: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.users)

    def pairs(self) -> Iterator[tuple[int, int]]:
        return zip(self.users.tolist(), self.items.tolist())

    def keys(self) -> np.ndarray:
        """Sorted u * num_items + i keys, for O(log n) membership tests."""
        return np.sort(self.users.astype(np.int64) * self.num_items + self.items)

    def items_by_user(self) -> list[np.ndarray]:
        order = np.argsort(self.users, kind="stable")
        grouped: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * self.num_users
        bounds = np.searchsorted(self.users[order], np.arange(self.num_users + 1))
        for u in range(self.num_users):
            grouped[u] = self.items[order[bounds[u] : bounds[u + 1]]]
        return grouped


@dataclass
class SplitDataset:
    train: InteractionLog
    # one held-out item per user, -1 where the user was too small to split
    validation: np.ndarray
    test: np.ndarray

    def eval_users(self) -> np.ndarray:
        return np.nonzero(self.test >= 0)[0]


@dataclass
class Batch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def load_interactions(source: Iterable[str] | str | Path) -> InteractionLog:
    """Parse an interaction stream into a dense, deduplicated log.

    source may be a path or any iterable of lines.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return load_interactions(fh)

    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    users: list[int] = []
    items: list[int] = []
    seen: set[tuple[int, int]] = set()
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 2:
            raise DataError(f"line {lineno}: expected 'user item', got {raw!r}")
        u = user_map.setdefault(fields[0], len(user_map))
        i = item_map.setdefault(fields[1], len(item_map))
        if (u, i) in seen:
            continue
        seen.add((u, i))
        users.append(u)
        items.append(i)
    if not users:
        raise DataError("no interactions found in input")
    return InteractionLog(
        num_users=len(user_map),
        num_items=len(item_map),
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        user_id_map=user_map,
        item_id_map=item_map,
    )


def filter_min_interactions(
    log: InteractionLog, min_user: int = 0, min_item: int = 0
) -> InteractionLog:
    """Drop users/items below the thresholds, iterating until stable.

    Removing a user can push an item below threshold and vice versa, so the
    two prunes alternate until a fixed point, then indices are re-densified.
    """
    if min_user < 0 or min_item < 0:
        raise ValueError("thresholds must be >= 0")
    users, items = log.users, log.items
    while True:
        ucnt = np.bincount(users, minlength=log.num_users)
        icnt = np.bincount(items, minlength=log.num_items)
        keep = (ucnt[users] >= min_user) & (icnt[items] >= min_item)
        if keep.all():
            break
        users, items = users[keep], items[keep]
        if len(users) == 0:
            raise DataError("filtering removed every interaction")
    kept_users = np.unique(users)
    kept_items = np.unique(items)
    umap = np.full(log.num_users, -1, dtype=np.int64)
    imap = np.full(log.num_items, -1, dtype=np.int64)
    umap[kept_users] = np.arange(len(kept_users))
    imap[kept_items] = np.arange(len(kept_items))
    user_ids = {ext: int(umap[ix]) for ext, ix in log.user_id_map.items() if umap[ix] >= 0}
    item_ids = {ext: int(imap[ix]) for ext, ix in log.item_id_map.items() if imap[ix] >= 0}
    return InteractionLog(
        num_users=len(kept_users),
        num_items=len(kept_items),
        users=umap[users],
        items=imap[items],
        user_id_map=user_ids,
        item_id_map=item_ids,
    )


def leave_one_out_split(log: InteractionLog, seed: int) -> SplitDataset:
    """Hold out one test and one validation item per user with >= 3 interactions.

    The held-out items are chosen uniformly at random, deterministically for
    a given seed. Smaller users keep everything in train and are skipped at
    evaluation time.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17]))
    per_user = log.items_by_user()
    test = np.full(log.num_users, -1, dtype=np.int64)
    val = np.full(log.num_users, -1, dtype=np.int64)
    train_users: list[np.ndarray] = []
    train_items: list[np.ndarray] = []
    for u in range(log.num_users):
        owned = per_user[u]
        if len(owned) >= 3:
            picked = rng.choice(len(owned), size=2, replace=False)
            test[u], val[u] = owned[picked[0]], owned[picked[1]]
            rest = np.delete(owned, picked)
        else:
            rest = owned
        train_users.append(np.full(len(rest), u, dtype=np.int64))
        train_items.append(rest)
    train = InteractionLog(
        num_users=log.num_users,
        num_items=log.num_items,
        users=np.concatenate(train_users),
        items=np.concatenate(train_items),
        user_id_map=dict(log.user_id_map),
        item_id_map=dict(log.item_id_map),
    )
    return SplitDataset(train=train, validation=val, test=test)


def sample_batches(
    train: InteractionLog, batch_size: int, rng: np.random.Generator
) -> Iterator[Batch]:
    """One shuffled epoch over all train pairs with one negative per pair.

    Negatives are drawn uniformly and redrawn while they collide with the
    user's train set. The final batch may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    degrees = np.bincount(train.users, minlength=train.num_users)
    saturated = np.nonzero(degrees >= train.num_items)[0]
    if len(saturated):
        raise DataError(
            f"user {int(saturated[0])} interacts with every item; "
            "cannot sample negatives"
        )
    keys = train.keys()
    order = rng.permutation(len(train))
    for start in range(0, len(train), batch_size):
        sel = order[start : start + batch_size]
        users = train.users[sel]
        pos = train.items[sel]
        neg = rng.integers(0, train.num_items, size=len(sel), dtype=np.int64)
        for _ in range(10_000):
            cand = users * train.num_items + neg
            hit = np.searchsorted(keys, cand)
            hit = np.minimum(hit, len(keys) - 1)
            bad = keys[hit] == cand
            if not bad.any():
                break
            neg[bad] = rng.integers(0, train.num_items, size=int(bad.sum()))
        else:
            stuck = int(users[bad][0])
            raise DataError(f"negative sampling stalled for user {stuck}")
        yield Batch(users=users, pos_items=pos, neg_items=neg)


def save_split(split: SplitDataset, out_dir: str | Path) -> None:
    """Persist train/val/test as dense-index text files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.txt", "w", encoding="utf-8") as fh:
        for u, i in zip(split.train.users, split.train.items):
            fh.write(f"{u} {i}\n")
    for name, held in (("val.txt", split.validation), ("test.txt", split.test)):
        with open(out / name, "w", encoding="utf-8") as fh:
            for u in np.nonzero(held >= 0)[0]:
                fh.write(f"{u} {held[u]}\n")


def load_split(split_dir: str | Path) -> SplitDataset:
    """Load a split written by save_split. Indices in the files are dense."""
    split_dir = Path(split_dir)

    def read_pairs(path: Path) -> tuple[np.ndarray, np.ndarray]:
        us, its = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                a, b = line.split()[:2]
                us.append(int(a))
                its.append(int(b))
        return np.asarray(us, dtype=np.int64), np.asarray(its, dtype=np.int64)

    tr_u, tr_i = read_pairs(split_dir / "train.txt")
    va_u, va_i = read_pairs(split_dir / "val.txt")
    te_u, te_i = read_pairs(split_dir / "test.txt")
    if len(tr_u) == 0:
        raise DataError(f"empty train split in {split_dir}")
    num_users = int(max(tr_u.max(), va_u.max(initial=-1), te_u.max(initial=-1))) + 1
    num_items = int(max(tr_i.max(), va_i.max(initial=-1), te_i.max(initial=-1))) + 1
    train = InteractionLog(
        num_users=num_users,
        num_items=num_items,
        users=tr_u,
        items=tr_i,
        user_id_map={str(u): u for u in range(num_users)},
        item_id_map={str(i): i for i in range(num_items)},
    )
    val = np.full(num_users, -1, dtype=np.int64)
    test = np.full(num_users, -1, dtype=np.int64)
    val[va_u] = va_i
    test[te_u] = te_i
    return SplitDataset(train=train, validation=val, test=test)
