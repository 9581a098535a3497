"""Top-k ranking metrics and full-catalog leave-one-out evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import PAD, Split, batch_fixed


class MetricContractError(ValueError):
    pass


def _rank_of(ranked, target) -> int:
    ranked = list(ranked)
    if len(set(ranked)) != len(ranked):
        raise MetricContractError("ranked list contains duplicates")
    try:
        return ranked.index(target) + 1
    except ValueError:
        raise MetricContractError(f"target {target} is not among the ranked candidates") from None


def recall_at_k(ranked, target, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    return int(_rank_of(ranked, target) <= k)


def ndcg_at_k(ranked, target, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    rank = _rank_of(ranked, target)
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def rank_metrics(ranks: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-user recall and NDCG at k from 1-based ranks."""
    ranks = np.asarray(ranks)
    hit = ranks <= k
    return hit.astype(np.float64), np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)


@dataclass
class MetricReport:
    mode: str
    ks: tuple[int, ...]
    num_users: int
    overall: dict[str, float]
    buckets: dict[str, dict] = field(default_factory=dict)
    ranks: np.ndarray | None = field(default=None, repr=False)
    uids: list[int] | None = field(default=None, repr=False)

    def __getitem__(self, key: str) -> float:
        return self.overall[key]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ks": list(self.ks),
            "num_users": self.num_users,
            "overall": self.overall,
            "buckets": self.buckets,
        }


def _summarize(ranks: np.ndarray, ks) -> dict[str, float]:
    out = {}
    for k in ks:
        rec, ndcg = rank_metrics(ranks, k)
        out[f"recall@{k}"] = float(rec.mean()) if len(ranks) else 0.0
        out[f"ndcg@{k}"] = float(ndcg.mean()) if len(ranks) else 0.0
    return out


def target_ranks(
    model,
    split: Split,
    mode: str,
    batch_size: int = 256,
    num_negatives: int | None = None,
    seed: int = 0,
) -> np.ndarray:
    """1-based rank of each user's target among its eligible candidates.

    Eligible candidates are every real item the user has not already seen
    in the input history (the target itself always stays eligible). Higher
    score ranks first; equal scores fall back to ascending item id. With
    ``num_negatives`` set, the candidate pool is the target plus that many
    uniformly sampled eligible items instead of the whole catalog.
    """
    n = model.cfg.n
    rng = np.random.default_rng(seed) if num_negatives else None
    ranks = np.empty(len(split), dtype=np.int64)
    for start in range(0, len(split), batch_size):
        rows = range(start, min(start + batch_size, len(split)))
        histories = [split.history(i, mode) for i in rows]
        targets = np.array([split.target(i, mode) for i in rows])
        uids = np.array([split.uids[i] for i in rows])
        trace = model.forward(batch_fixed(histories, n))
        scores = model.score_all(trace, uids)
        for r, (hist, tgt) in enumerate(zip(histories, targets)):
            eligible = np.ones(scores.shape[1], dtype=bool)
            eligible[PAD] = False
            eligible[hist] = False
            eligible[tgt] = True
            if rng is not None:
                pool = np.flatnonzero(eligible)
                pool = pool[pool != tgt]
                picked = rng.choice(pool, size=min(num_negatives, len(pool)), replace=False)
                eligible = np.zeros_like(eligible)
                eligible[picked] = True
                eligible[tgt] = True
            s = scores[r]
            st = s[tgt]
            ids = np.arange(len(s))
            better = eligible & ((s > st) | ((s == st) & (ids < tgt)))
            ranks[start + r] = 1 + int(better.sum())
    return ranks


def evaluate(
    model,
    split: Split,
    mode: str = "val",
    ks=(10, 20),
    buckets: dict[str, list[int]] | None = None,
    batch_size: int = 256,
    num_negatives: int | None = None,
    seed: int = 0,
) -> MetricReport:
    if mode not in ("val", "test"):
        raise ValueError(f"mode must be 'val' or 'test', got {mode!r}")
    ks = tuple(int(k) for k in ks)
    ranks = target_ranks(model, split, mode, batch_size, num_negatives, seed)
    report = MetricReport(mode, ks, len(split), _summarize(ranks, ks), ranks=ranks, uids=list(split.uids))
    if buckets:
        pos = {u: i for i, u in enumerate(split.uids)}
        for name, members in buckets.items():
            sel = np.array([pos[u] for u in members if u in pos], dtype=np.int64)
            entry = {"num_users": int(len(sel))}
            entry.update(_summarize(ranks[sel], ks))
            report.buckets[name] = entry
    return report
