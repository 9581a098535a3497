"""Interaction-log ingestion, implicit-feedback filtering and sequence splits."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
SNAPSHOT_FORMAT = "starseq-dataset"
SNAPSHOT_VERSION = 1
MAX_MALFORMED_FRACTION = 0.01

BUCKET_NAMES = (
    "top-10%",
    "top-10-20%",
    "top-20-30%",
    "top-30-40%",
    "top-40-50%",
    "bottom-40-50%",
    "bottom-30-40%",
    "bottom-20-30%",
    "bottom-10-20%",
    "bottom-10%",
)


class IngestionError(ValueError):
    pass


class PreprocessingError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    rating: float
    timestamp: int


@dataclass
class InteractionLog:
    records: list[Interaction]
    malformed: int = 0
    duplicates: int = 0

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class Dataset:
    """Densely indexed users/items with per-user chronological item lists.

    Item id 0 is the padding item and never appears in a sequence, so item
    ids run 1..num_items and ``catalog_size == num_items + 1``.
    """

    user_ids: list[str]
    item_ids: list[str]  # item_ids[0] is the padding placeholder ""
    sequences: list[list[int]]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids) - 1

    @property
    def catalog_size(self) -> int:
        return len(self.item_ids)

    def uid(self, user_id: str) -> int:
        return self.user_ids.index(user_id)


@dataclass
class Split:
    """Leave-one-out split. Index i holds user uid ``uids[i]``."""

    uids: list[int]
    train: list[list[int]]
    val_target: list[int]
    test_target: list[int]
    num_users: int
    catalog_size: int
    excluded: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.uids)

    def history(self, i: int, mode: str) -> list[int]:
        """Input history for predicting the ``mode`` target of row i."""
        if mode == "val":
            return self.train[i]
        if mode == "test":
            return self.train[i] + [self.val_target[i]]
        raise ValueError(f"mode must be 'val' or 'test', got {mode!r}")

    def target(self, i: int, mode: str) -> int:
        if mode == "val":
            return self.val_target[i]
        if mode == "test":
            return self.test_target[i]
        raise ValueError(f"mode must be 'val' or 'test', got {mode!r}")


@dataclass(frozen=True)
class FixedSequence:
    items: np.ndarray
    pad_count: int

    @property
    def valid(self) -> bool:
        return self.pad_count < len(self.items)

    @property
    def mask(self) -> np.ndarray:
        return self.items != PAD


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_tsv(path: str | Path) -> InteractionLog:
    """Parse ``user<TAB>item<TAB>rating<TAB>timestamp`` lines.

    A first line whose rating field is not numeric is taken as a header.
    Other unparsable lines are skipped and counted; more than 1% of them
    aborts ingestion. Repeated (user, item, timestamp) triples keep the first
    occurrence.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read interaction log {path}: {exc}") from exc

    records: list[Interaction] = []
    seen: set[tuple[str, str, int]] = set()
    malformed = duplicates = total = 0
    for lineno, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        fields = line.rstrip("\r").split("\t")
        if lineno == 0 and len(fields) >= 4 and not _is_number(fields[2]):
            continue
        total += 1
        try:
            user, item = fields[0], fields[1]
            rating = float(fields[2])
            timestamp = int(fields[3])
            if not user or not item or not math.isfinite(rating):
                raise ValueError
        except (IndexError, ValueError):
            malformed += 1
            continue
        key = (user, item, timestamp)
        if key in seen:
            duplicates += 1
            continue
        seen.add(key)
        records.append(Interaction(user, item, rating, timestamp))

    if total and malformed / total > MAX_MALFORMED_FRACTION:
        raise IngestionError(f"{malformed} of {total} lines malformed in {path} (limit 1%)")
    if malformed:
        logger.warning("skipped %d malformed lines in %s", malformed, path)
    return InteractionLog(records, malformed=malformed, duplicates=duplicates)


def _filter_fixed_point(records: list[Interaction], min_user: int, min_item: int) -> list[Interaction]:
    while True:
        ucount = Counter(r.user for r in records)
        icount = Counter(r.item for r in records)
        kept = [r for r in records if ucount[r.user] >= min_user and icount[r.item] >= min_item]
        if len(kept) == len(records):
            return kept
        records = kept


def preprocess(
    log: InteractionLog,
    min_user: int = 5,
    min_item: int = 5,
    rating_threshold: float = 4.0,
) -> Dataset:
    """Binarize ratings, k-core filter to a fixed point, and index densely.

    Users and items are numbered in order of first appearance in the log;
    sequences are ordered by timestamp with ties kept in log order.
    """
    if min_user < 1 or min_item < 1:
        raise ConfigurationError("minimum-count thresholds must be >= 1")
    positive = [r for r in log.records if r.rating >= rating_threshold]
    kept = _filter_fixed_point(positive, min_user, min_item)
    if not kept:
        raise PreprocessingError(
            f"no interactions left: {len(log.records)} records, {len(positive)} with "
            f"rating >= {rating_threshold}, 0 after min_user={min_user}/min_item={min_item} filtering"
        )

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    for r in kept:
        user_index.setdefault(r.user, len(user_index))
        item_index.setdefault(r.item, len(item_index) + 1)

    per_user: list[list[tuple[int, int, int]]] = [[] for _ in user_index]
    for order, r in enumerate(kept):
        per_user[user_index[r.user]].append((r.timestamp, order, item_index[r.item]))
    sequences = [[vid for _, _, vid in sorted(events)] for events in per_user]

    return Dataset(
        user_ids=list(user_index),
        item_ids=[""] + list(item_index),
        sequences=sequences,
    )


def dataset_from_sequences(sequences: list[list[int]], num_items: int) -> Dataset:
    """Wrap already-indexed sequences (item ids 1..num_items)."""
    for seq in sequences:
        if any(v < 1 or v > num_items for v in seq):
            raise ValueError("sequence item ids must lie in 1..num_items")
    return Dataset(
        user_ids=[str(u) for u in range(len(sequences))],
        item_ids=[""] + [str(v) for v in range(1, num_items + 1)],
        sequences=[list(s) for s in sequences],
    )


def split_leave_one_out(ds: Dataset) -> Split:
    uids, train, val, test, excluded = [], [], [], [], []
    for uid, seq in enumerate(ds.sequences):
        if len(seq) < 3:
            excluded.append(uid)
            continue
        uids.append(uid)
        train.append(list(seq[:-2]))
        val.append(seq[-2])
        test.append(seq[-1])
    if excluded:
        logger.info("excluded %d users with fewer than 3 interactions", len(excluded))
    return Split(uids, train, val, test, ds.num_users, ds.catalog_size, excluded)


def to_fixed_length(seq: list[int] | np.ndarray, n: int) -> FixedSequence:
    """Keep the last ``n`` items, left-padding with item 0 when shorter."""
    if n < 1:
        raise ValueError("sequence length n must be >= 1")
    tail = list(seq)[-n:]
    pad = n - len(tail)
    items = np.zeros(n, dtype=np.int64)
    items[pad:] = tail
    return FixedSequence(items, pad)


def batch_fixed(seqs: list[list[int]], n: int) -> np.ndarray:
    out = np.zeros((len(seqs), n), dtype=np.int64)
    for row, seq in enumerate(seqs):
        tail = seq[-n:]
        if tail:
            out[row, n - len(tail):] = tail
    return out


def activity_buckets(split: Split) -> dict[str, list[int]]:
    """Ten activity buckets by training-history length.

    Users are ranked by train length descending (uid ascending on ties);
    bucket b covers ranks floor(b*N/10) .. floor((b+1)*N/10) - 1, so the
    first five buckets are the top deciles and the last five the bottom
    ones, ending with the bottom 10%.
    """
    n_users = len(split)
    if n_users < 10:
        raise ConfigurationError(f"activity buckets need at least 10 users, got {n_users}")
    order = sorted(range(n_users), key=lambda i: (-len(split.train[i]), split.uids[i]))
    buckets = {}
    for b, name in enumerate(BUCKET_NAMES):
        lo, hi = (b * n_users) // 10, ((b + 1) * n_users) // 10
        buckets[name] = sorted(split.uids[i] for i in order[lo:hi])
    return buckets


def synthetic_cycle(
    num_users: int = 200,
    num_items: int = 50,
    steps: int = 30,
    seed: int = 0,
) -> Dataset:
    """Users walking one fixed random permutation cycle over the catalog.

    Every user starts at a random item and follows the cycle for ``steps``
    interactions, so the next item is a deterministic function of the
    current one.
    """
    if steps > num_items:
        raise ValueError("steps must not exceed num_items (walks would repeat items)")
    rng = np.random.default_rng(seed)
    cycle = rng.permutation(num_items) + 1
    starts = rng.integers(0, num_items, size=num_users)
    sequences = [[int(cycle[(s + t) % num_items]) for t in range(steps)] for s in starts]
    return dataset_from_sequences(sequences, num_items)


def synthetic_log_lines(ds: Dataset) -> list[str]:
    lines = ["user\titem\trating\ttimestamp"]
    for uid, seq in enumerate(ds.sequences):
        for t, vid in enumerate(seq):
            lines.append(f"{ds.user_ids[uid]}\t{ds.item_ids[vid]}\t5\t{t}")
    return lines


# --- snapshot ---------------------------------------------------------------


def snapshot_dict(ds: Dataset, split: Split, meta: dict | None = None) -> dict:
    return {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "meta": meta or {},
        "user_ids": ds.user_ids,
        "item_ids": ds.item_ids,
        "sequences": ds.sequences,
        "split": {
            "uids": split.uids,
            "train": split.train,
            "val_target": split.val_target,
            "test_target": split.test_target,
            "excluded": split.excluded,
        },
    }


def data_hash(snapshot: dict) -> str:
    body = {k: v for k, v in snapshot.items() if k not in ("meta", "data_hash")}
    blob = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_snapshot(path: str | Path, ds: Dataset, split: Split, meta: dict | None = None) -> str:
    snap = snapshot_dict(ds, split, meta)
    snap["data_hash"] = data_hash(snap)
    Path(path).write_text(json.dumps(snap, sort_keys=True) + "\n", encoding="utf-8")
    return snap["data_hash"]


def load_snapshot(path: str | Path) -> tuple[Dataset, Split, str]:
    snap = json.loads(Path(path).read_text(encoding="utf-8"))
    if snap.get("format") != SNAPSHOT_FORMAT:
        raise IngestionError(f"{path} is not a dataset snapshot")
    if snap.get("version") != SNAPSHOT_VERSION:
        raise IngestionError(f"unsupported snapshot version {snap.get('version')}")
    ds = Dataset(snap["user_ids"], snap["item_ids"], snap["sequences"])
    sp = snap["split"]
    split = Split(
        sp["uids"], sp["train"], sp["val_target"], sp["test_target"],
        ds.num_users, ds.catalog_size, sp.get("excluded", []),
    )
    digest = data_hash(snap)
    if snap.get("data_hash") not in (None, digest):
        raise IngestionError(f"snapshot hash mismatch in {path}")
    return ds, split, digest
