"""Mini-batch BCE training with one sampled negative per example."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import PAD, Split, batch_fixed
from .metrics import evaluate
from .model import Checkpoint, bce_loss

logger = logging.getLogger(__name__)


class SamplingError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    examples: str = "all"  # "all" prefixes or only the "last" one per user
    eval_k: int = 10

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.examples not in ("last", "all"):
            raise ValueError("examples must be 'last' or 'all'")


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0:
                continue
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)


def sample_negative(rng: np.random.Generator, seen, catalog_size: int, max_tries: int = 10_000) -> int:
    """Uniform draw from item ids 1..catalog_size-1 that are not in ``seen``."""
    seen = seen if isinstance(seen, (set, frozenset)) else set(seen)
    n_items = catalog_size - 1
    eligible = n_items - len({v for v in seen if 1 <= v <= n_items})
    if eligible <= 0:
        raise SamplingError("every catalog item is in the user's history; cannot sample a negative")
    for _ in range(max_tries):
        v = int(rng.integers(1, catalog_size))
        if v not in seen:
            return v
    # dense histories: fall back to an explicit draw over the complement
    pool = [v for v in range(1, catalog_size) if v not in seen]
    return int(pool[rng.integers(len(pool))])


def build_examples(split: Split, mode: str = "last") -> tuple[list[int], list[list[int]], list[int]]:
    """(row, prefix, next item) triples from the train portion of each user.

    ``last`` yields one example per user (prefix = train minus its last item);
    ``all`` yields every prefix. Users with a single train item contribute
    nothing since their prefix would be empty.
    """
    rows, prefixes, targets = [], [], []
    for i, seq in enumerate(split.train):
        if mode == "all":
            cuts = range(1, len(seq))
        else:
            cuts = [len(seq) - 1] if len(seq) > 1 else []
        for t in cuts:
            rows.append(i)
            prefixes.append(seq[:t])
            targets.append(seq[t])
    return rows, prefixes, targets


def train_epoch(model, split: Split, cfg: TrainConfig, adam: Adam, rng: np.random.Generator) -> dict:
    rows, prefixes, targets = build_examples(split, cfg.examples)
    if not rows:
        raise TrainingError("no training examples (every user has a single train item)")
    seen = [frozenset(s) for s in split.train]
    order = rng.permutation(len(rows))
    n = model.cfg.n
    total_loss = 0.0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        items = batch_fixed([prefixes[j] for j in idx], n)
        uids = np.array([split.uids[rows[j]] for j in idx])
        pos = np.array([targets[j] for j in idx])
        neg = np.array([sample_negative(rng, seen[rows[j]], split.catalog_size) for j in idx])
        adam.zero_grad()
        with ad.Graph():
            trace = model.forward(items)
            scores = model.score(trace, uids, np.stack([pos, neg], axis=1))
            r_pos = ad.select(scores, (slice(None), 0))
            r_neg = ad.select(scores, (slice(None), 1))
            loss = bce_loss(r_pos, r_neg)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at example offset {start}")
            ad.backward(loss)
        adam.step()
        model.pin_padding()
        total_loss += loss.item()
    return {"mean_loss": total_loss / len(rows), "examples": len(rows), "steps": adam.step_count}


def fit(
    model,
    split: Split,
    cfg: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
    meta: dict | None = None,
) -> Checkpoint:
    """Train until ``max_epochs`` or ``patience`` epochs without a better
    validation Recall@k; return the best-scoring epoch's parameters.
    Ties keep the earlier epoch.
    """
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(model.parameters(), cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    key = f"recall@{cfg.eval_k}"
    best_metric, best_epoch, best_state = -1.0, 0, model.state_dict()
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        stats = train_epoch(model, split, cfg, adam, rng)
        report = evaluate(model, split, "val", ks=sorted({1, cfg.eval_k}))
        val = report[key]
        record = {
            "epoch": epoch,
            "mean_loss": stats["mean_loss"],
            f"val_{key}": val,
            "val_recall@1": report["recall@1"],
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        }
        logger.info(json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)
        if val > best_metric:
            best_metric, best_epoch, best_state = val, epoch, model.state_dict()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    info = dict(meta or {})
    info.update({"best_epoch": best_epoch, f"val_{key}": best_metric, "epochs_run": epoch, "train": asdict(cfg)})
    return Checkpoint(model.cfg, best_state, info)
