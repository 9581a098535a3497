"""Analytical probes: item-embedding smoothing, attention entropy, op counts, runtime."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import Split, batch_fixed
from .model import BaselineSAModel, ModelConfig, build_model

logger = logging.getLogger(__name__)


class ProbeError(RuntimeError):
    pass


def _sample_rows(split: Split, sample_size: int | None, seed: int) -> np.ndarray:
    total = len(split)
    if sample_size is None or sample_size >= total:
        return np.arange(total)
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(total, size=sample_size, replace=False))


# --- over-smoothing ----------------------------------------------------------


@dataclass
class SmoothingProfile:
    a: list[float]  # one mean similarity per block
    uids: list[int]
    per_user: list[list[float]] = field(repr=False)
    zero_norm_pairs: int = 0
    include_diagonal: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def mean_pairwise_cosine(rows: np.ndarray, include_diagonal: bool = True) -> tuple[float, int]:
    """Mean cosine over ordered pairs of rows, plus the count of pairs
    involving a zero-norm row (those pairs contribute 0)."""
    count = rows.shape[0]
    norms = np.linalg.norm(rows, axis=1)
    nonzero = norms > 0
    unit = np.zeros_like(rows)
    unit[nonzero] = rows[nonzero] / norms[nonzero, None]
    cos = unit @ unit.T
    bad = ~(nonzero[:, None] & nonzero[None, :])
    if include_diagonal:
        return float(cos.sum() / count**2), int(bad.sum())
    off = ~np.eye(count, dtype=bool)
    if count < 2:
        raise ProbeError("off-diagonal similarity needs at least two items")
    return float(cos[off].sum() / (count * (count - 1))), int((bad & off).sum())


def smoothing_profile(
    model,
    split: Split,
    sample_size: int | None = None,
    seed: int = 0,
    mode: str = "test",
    include_diagonal: bool = True,
) -> SmoothingProfile:
    """Per-block mean cosine similarity between item rows of each sequence.

    For every sampled user the fixed-length input (the history used to
    predict the ``mode`` target) is pushed through the model and, after each
    block, the real (non-padding) item rows are compared pairwise.
    """
    rows = _sample_rows(split, sample_size, seed)
    if not include_diagonal:
        rows = np.array([r for r in rows if len(split.history(r, mode)[-model.cfg.n:]) >= 2], dtype=np.int64)
    if len(rows) == 0:
        raise ProbeError("no users to probe")
    items = batch_fixed([split.history(r, mode) for r in rows], model.cfg.n)
    trace = model.forward(items)
    per_user = np.zeros((len(rows), model.cfg.n_blocks))
    zero_pairs = 0
    for m, X in enumerate(trace.item_states):
        for u in range(len(rows)):
            real = X.data[u][trace.mask[u]]
            per_user[u, m], z = mean_pairwise_cosine(real, include_diagonal)
            zero_pairs += z
    if zero_pairs:
        logger.warning("%d item pairs involved a zero-norm embedding (cosine taken as 0)", zero_pairs)
    return SmoothingProfile(
        a=[float(v) for v in per_user.mean(axis=0)],
        uids=[split.uids[r] for r in rows],
        per_user=per_user.tolist(),
        zero_norm_pairs=zero_pairs,
        include_diagonal=include_diagonal,
    )


# --- attention entropy -------------------------------------------------------


@dataclass
class EntropyReport:
    mean_attention_entropy: float
    mean_uniform_entropy: float
    information_gain: float
    mean_attention_entropy_bits: float
    mean_uniform_entropy_bits: float
    positions: int
    num_users: int
    block: int

    def to_dict(self) -> dict:
        return asdict(self)


def row_entropy(p: np.ndarray) -> float:
    """-sum p log p in nats with 0 log 0 taken as 0."""
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def attention_entropy(
    model: BaselineSAModel,
    split: Split,
    sample_size: int | None = None,
    seed: int = 0,
    mode: str = "test",
    block: int = 0,
    tol: float = 1e-6,
) -> EntropyReport:
    """Mean entropy of the causal attention rows of one baseline block.

    Only rows of real (non-padding) positions count. Each row's uniform
    reference is log of the number of keys it may attend to; with every head
    treated as its own distribution, both means run over (user, head,
    position) triples.
    """
    if not isinstance(model, BaselineSAModel):
        raise ProbeError("attention entropy needs the self-attention baseline")
    rows = _sample_rows(split, sample_size, seed)
    items = batch_fixed([split.history(r, mode) for r in rows], model.cfg.n)
    trace = model.forward(items)
    keep = BaselineSAModel.attention_mask(trace.mask)
    h_sum = u_sum = 0.0
    count = 0
    for A in trace.attention[block]:
        sums = A.sum(axis=-1)
        for u in range(len(rows)):
            for j in np.flatnonzero(trace.mask[u]):
                if abs(sums[u, j] - 1.0) > tol:
                    raise ProbeError(f"attention row (user {u}, position {j}) sums to {sums[u, j]!r}")
                h_sum += row_entropy(A[u, j, : j + 1])
                u_sum += math.log(int(keep[u, j].sum()))
                count += 1
    if count == 0:
        raise ProbeError("no real positions to probe")
    h, hu = h_sum / count, u_sum / count
    # uniform maximizes entropy on each support; a negative gap is rounding only
    gain = hu - h
    if gain < 0:
        if gain < -1e-9:
            raise ProbeError(f"attention entropy exceeds uniform entropy by {-gain!r}")
        gain = 0.0
    return EntropyReport(
        mean_attention_entropy=h,
        mean_uniform_entropy=hu,
        information_gain=gain,
        mean_attention_entropy_bits=h / math.log(2),
        mean_uniform_entropy_bits=hu / math.log(2),
        positions=count,
        num_users=len(rows),
        block=block,
    )


# --- op counts ---------------------------------------------------------------


def sa_ops(n: int, d: int) -> int:
    return 6 * n * d * d + 2 * n * n * d + 2 * n * d


def star_ops(n: int, d: int) -> int:
    return 2 * n * d * d + 4 * d * d + 2 * n * d + 2 * d


def ops_difference(n: int, d: int) -> int:
    return 4 * d * d * (n - 1) + 2 * d * (n * n - 1)


def op_counts(n: int, d: int) -> dict[str, int]:
    """Per-block operation counts of a full self-attention block and a star block."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    return {"n": n, "d": d, "sa": sa_ops(n, d), "star": star_ops(n, d), "diff": ops_difference(n, d)}


# --- runtime -----------------------------------------------------------------


@dataclass
class RuntimeSample:
    kind: str
    n: int
    d: int
    n_b: int
    repetitions: int
    median_us: float
    p95_us: float
    mean_us: float


def bench_runtime(
    kind: str,
    n_grid,
    d: int = 64,
    n_b: int = 2,
    reps: int = 15,
    n_heads: int = 2,
    users_per_rep: int = 4,
    warmup: int = 3,
    catalog_size: int = 1001,
    seed: int = 0,
) -> list[RuntimeSample]:
    """Forward-only wall time per user on a frozen, randomly initialized model.

    Each repetition times ``users_per_rep`` single-user forward passes over
    full-length sequences and records the per-user average. BLAS is pinned
    to one thread while timing.
    """
    if reps < 5:
        raise ValueError("need at least 5 repetitions")
    rng = np.random.default_rng(seed)
    samples = []
    with threadpool_limits(limits=1):
        for n in n_grid:
            cfg = ModelConfig(num_users=1, catalog_size=catalog_size, kind=kind, d=d, n=int(n), n_heads=n_heads, n_blocks=n_b)
            model = build_model(cfg, seed=seed)
            seqs = rng.integers(1, catalog_size, size=(users_per_rep, int(n)))
            for _ in range(warmup):
                model.forward(seqs[:1])
            times = []
            for _ in range(reps):
                t0 = time.perf_counter_ns()
                for row in seqs:
                    model.forward(row[None, :])
                times.append((time.perf_counter_ns() - t0) / 1e3 / users_per_rep)
            times = np.array(times)
            if times.min() < 1.0:
                logger.warning("per-user time below 1us for %s n=%d; timer resolution dominates", kind, n)
            samples.append(
                RuntimeSample(
                    kind=kind,
                    n=int(n),
                    d=d,
                    n_b=n_b,
                    repetitions=reps,
                    median_us=float(np.median(times)),
                    p95_us=float(np.percentile(times, 95)),
                    mean_us=float(times.mean()),
                )
            )
    return samples


def loglog_slope(ns, times) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(ns, dtype=float)), np.log(np.asarray(times, dtype=float)), 1)
    return float(slope)


def runtime_csv(samples: list[RuntimeSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "n", "d", "n_b", "median_us", "p95_us"])
    for s in samples:
        w.writerow([s.kind, s.n, s.d, s.n_b, f"{s.median_us:.3f}", f"{s.p95_us:.3f}"])
    return buf.getvalue()
