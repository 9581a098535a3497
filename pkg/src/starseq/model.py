"""Star-graph sequential recommender and a causal self-attention baseline.

Both models take a batch of fixed-length item-id rows ``(B, n)`` (left
padded with item 0) and return a :class:`ForwardTrace` holding every
intermediate the probes need. A single sequence is just ``B == 1``.

In the star model only the hub state ``c`` evolves across blocks; the item
rows ``E`` are computed once and reused verbatim. The baseline updates every
item row in every block, which is what makes its item embeddings drift
toward each other.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PAD, FixedSequence

CHECKPOINT_FORMAT = "starseq-checkpoint"
CHECKPOINT_VERSION = 1


class ContractError(ValueError):
    """Inputs violate a precondition of a model operation."""


@dataclass
class ModelConfig:
    num_users: int
    catalog_size: int  # number of items including the padding item 0
    kind: str = "star"  # "star" | "baseline"
    d: int = 64
    n: int = 50
    n_heads: int = 2
    n_blocks: int = 2
    activation: str = "gelu"
    use_user_embedding: bool = True
    attention_scale: str = "d"  # "d" -> sqrt(d) ; "head" -> sqrt(d / n_heads)
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        if self.kind not in ("star", "baseline"):
            raise ValueError(f"model kind must be 'star' or 'baseline', got {self.kind!r}")
        if self.d < 1 or self.n < 1 or self.n_heads < 1 or self.n_blocks < 1:
            raise ValueError("d, n, n_heads and n_blocks must all be >= 1")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"activation must be 'relu' or 'gelu', got {self.activation!r}")
        if self.attention_scale not in ("d", "head"):
            raise ValueError("attention_scale must be 'd' or 'head'")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def scale(self) -> float:
        return math.sqrt(self.d if self.attention_scale == "d" else self.head_dim)


@dataclass
class ForwardTrace:
    items: np.ndarray  # (B, n) item ids
    mask: np.ndarray  # (B, n) True on real items
    E: Tensor  # (B, n, d) input rows
    states: list[Tensor]  # star: c^0..c^nb, each (B, 1, d)
    attention: list[list[np.ndarray]]  # [block][head] -> (B, 1, n) star / (B, n, n) baseline
    item_states: list[Tensor]  # per block item matrices E^1..E^nb
    output: Tensor  # (B, 1, d) sequence representation fed to the scorer

    @property
    def batch_size(self) -> int:
        return self.items.shape[0]


class _Module:
    """Parameter bookkeeping shared by both model kinds."""

    cfg: ModelConfig
    params: dict[str, Tensor]

    def _new(self, rng: np.random.Generator, name: str, shape: tuple[int, ...], zero: bool = False) -> Tensor:
        dtype = np.dtype(self.cfg.dtype)
        if zero:
            data = np.zeros(shape, dtype=dtype)
        else:
            data = rng.normal(0.0, self.cfg.init_std, size=shape).astype(dtype)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _init_tables(self, rng: np.random.Generator) -> None:
        c = self.cfg
        self.V = self._new(rng, "V", (c.catalog_size, c.d))
        self.V.data[PAD] = 0.0
        self.P = self._new(rng, "P", (c.n, c.d))
        self.U = self._new(rng, "U", (c.num_users, c.d))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grads(self) -> None:
        ad.zero_grads(self.parameters())

    def pin_padding(self) -> None:
        self.V.data[PAD] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter set mismatch: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=t.data.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    # -- shared pieces -------------------------------------------------------

    def _as_batch(self, items) -> np.ndarray:
        if isinstance(items, FixedSequence):
            items = items.items
        arr = np.asarray(items, dtype=np.int64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.cfg.n:
            raise ContractError(f"expected item rows of length n={self.cfg.n}, got shape {arr.shape}")
        if arr.min() < 0 or arr.max() >= self.cfg.catalog_size:
            raise IndexError("item id out of range")
        return arr

    def embed(self, items) -> Tensor:
        """Item plus position embeddings; padded rows are forced to zero."""
        items = self._as_batch(items)
        mask = items != PAD
        E = ad.take_rows(self.V, items) + self.P
        return ad.mask_rows(E, mask[..., None])

    def feed_forward(self, block: dict[str, Tensor], g: Tensor) -> Tensor:
        hidden = ad.activation(g @ block["W1"] + block["b1"], self.cfg.activation)
        return hidden @ block["W2"] + block["b2"]

    def _ffn_params(self, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
        d = self.cfg.d
        return {
            "W1": self._new(rng, f"{prefix}.W1", (d, d)),
            "b1": self._new(rng, f"{prefix}.b1", (1, d), zero=True),
            "W2": self._new(rng, f"{prefix}.W2", (d, d)),
            "b2": self._new(rng, f"{prefix}.b2", (1, d), zero=True),
        }

    def user_vectors(self, uids) -> Tensor:
        uids = np.asarray(uids, dtype=np.int64).reshape(-1)
        return ad.take_rows(self.U, uids[:, None])  # (B, 1, d)

    def query(self, trace: ForwardTrace, uids) -> Tensor:
        """Representation that is dotted with item embeddings, shape (B, 1, d)."""
        h = trace.output
        if self.cfg.use_user_embedding:
            h = h + self.user_vectors(uids)
        return h

    def score(self, trace: ForwardTrace, uids, vids) -> Tensor:
        """Scores ``(c + u) . v`` for candidate ids ``vids`` of shape (B, K) or (K,)."""
        vids = np.asarray(vids, dtype=np.int64)
        if vids.ndim == 1:
            vids = np.broadcast_to(vids, (trace.batch_size, vids.shape[0]))
        if vids.size and (vids.min() < 0 or vids.max() >= self.cfg.catalog_size):
            raise IndexError("candidate item id out of range")
        uids = np.asarray(uids, dtype=np.int64).reshape(-1)
        if uids.size and (uids.min() < 0 or uids.max() >= self.cfg.num_users):
            raise IndexError("user id out of range")
        h = self.query(trace, uids)
        cand = ad.take_rows(self.V, vids)  # (B, K, d)
        out = h @ ad.transpose(cand)  # (B, 1, K)
        return ad.reshape(out, (trace.batch_size, vids.shape[1]))

    def score_all(self, trace: ForwardTrace, uids) -> np.ndarray:
        """Scores against the whole catalog (column 0 is the padding item)."""
        h = self.query(trace, uids).data[:, 0, :]
        return h @ self.V.data.T


class StarModel(_Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.kind != "star":
            raise ValueError("StarModel needs cfg.kind == 'star'")
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        self._init_tables(rng)
        d, dh = cfg.d, cfg.head_dim
        self.blocks: list[dict] = []
        for m in range(cfg.n_blocks):
            p = f"blocks.{m}"
            block = {
                "Q": [self._new(rng, f"{p}.Q.{k}", (d, dh)) for k in range(cfg.n_heads)],
                "Z": [self._new(rng, f"{p}.Z.{k}", (d, dh)) for k in range(cfg.n_heads)],
                "A": [self._new(rng, f"{p}.A.{k}", (d, dh)) for k in range(cfg.n_heads)],
                "O": self._new(rng, f"{p}.O", (d, d)),
            }
            block.update(self._ffn_params(rng, p))
            self.blocks.append(block)

    def star_attention(self, block: dict, c_prev: Tensor, E: Tensor, mask: np.ndarray):
        """Hub-to-items multi-head attention.

        Returns the aggregated message ``g`` (B, 1, d) and the per-head
        weight rows (B, 1, n). Padded positions get exactly zero weight.
        """
        keep = np.asarray(mask, dtype=bool).reshape(E.shape[0], 1, E.shape[1])
        if not keep.any(axis=-1).all():
            raise ContractError("every position is padding; need at least one real item")
        heads, alphas = [], []
        for Qk, Zk, Ak in zip(block["Q"], block["Z"], block["A"]):
            logits = ad.scale((c_prev @ Qk) @ ad.transpose(E @ Zk), 1.0 / self.cfg.scale)
            alpha = ad.softmax(logits, keep)
            heads.append(alpha @ (E @ Ak))
            alphas.append(alpha.data)
        g = ad.concat(heads, axis=-1) @ block["O"]
        return g, alphas

    def forward(self, items) -> ForwardTrace:
        items = self._as_batch(items)
        mask = items != PAD
        if not mask[:, -1].all():
            raise ContractError("sequence has no real item (all padding)")
        E = self.embed(items)
        c = ad.select(E, (slice(None), slice(-1, None)))  # c^0 = e_n
        states, attention = [c], []
        for block in self.blocks:
            g, alphas = self.star_attention(block, c, E, mask)
            a = c + g
            c = a + self.feed_forward(block, a)
            states.append(c)
            attention.append(alphas)
        return ForwardTrace(
            items=items,
            mask=mask,
            E=E,
            states=states,
            attention=attention,
            item_states=[E] * self.cfg.n_blocks,
            output=c,
        )


class BaselineSAModel(_Module):
    """Causal multi-head self-attention blocks over all item positions."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        if cfg.kind != "baseline":
            raise ValueError("BaselineSAModel needs cfg.kind == 'baseline'")
        self.cfg = cfg
        self.params = {}
        rng = np.random.default_rng(seed)
        self._init_tables(rng)
        d, dh = cfg.d, cfg.head_dim
        self.blocks: list[dict] = []
        for m in range(cfg.n_blocks):
            p = f"blocks.{m}"
            block = {
                "Wq": [self._new(rng, f"{p}.Wq.{k}", (d, dh)) for k in range(cfg.n_heads)],
                "Wk": [self._new(rng, f"{p}.Wk.{k}", (d, dh)) for k in range(cfg.n_heads)],
                "Wv": [self._new(rng, f"{p}.Wv.{k}", (d, dh)) for k in range(cfg.n_heads)],
                "O": self._new(rng, f"{p}.O", (d, d)),
            }
            block.update(self._ffn_params(rng, p))
            self.blocks.append(block)

    @staticmethod
    def attention_mask(mask: np.ndarray) -> np.ndarray:
        """(B, n, n) keep-mask: key k visible from query j iff k <= j and k is real.

        Padded query rows see the (padded) prefix instead so their softmax
        is defined; those rows are zeroed after every block anyway.
        """
        n = mask.shape[1]
        causal = np.tril(np.ones((n, n), dtype=bool))
        visible = mask[:, None, :] | ~mask[:, :, None]
        return causal[None] & visible

    def self_attention(self, block: dict, X: Tensor, keep: np.ndarray):
        heads, maps = [], []
        for Wq, Wk, Wv in zip(block["Wq"], block["Wk"], block["Wv"]):
            logits = ad.scale((X @ Wq) @ ad.transpose(X @ Wk), 1.0 / self.cfg.scale)
            alpha = ad.softmax(logits, keep)
            heads.append(alpha @ (X @ Wv))
            maps.append(alpha.data)
        return ad.concat(heads, axis=-1) @ block["O"], maps

    def forward(self, items) -> ForwardTrace:
        items = self._as_batch(items)
        mask = items != PAD
        if not mask[:, -1].all():
            raise ContractError("sequence has no real item (all padding)")
        keep = self.attention_mask(mask)
        row_keep = mask[..., None]
        E = self.embed(items)
        X = E
        item_states, attention = [], []
        for block in self.blocks:
            attn, maps = self.self_attention(block, X, keep)
            A = X + attn
            X = ad.mask_rows(A + self.feed_forward(block, A), row_keep)
            item_states.append(X)
            attention.append(maps)
        last = ad.select(X, (slice(None), slice(-1, None)))
        return ForwardTrace(
            items=items,
            mask=mask,
            E=E,
            states=[ad.select(E, (slice(None), slice(-1, None))), last],
            attention=attention,
            item_states=item_states,
            output=last,
        )


def build_model(cfg: ModelConfig, seed: int = 0) -> StarModel | BaselineSAModel:
    return StarModel(cfg, seed) if cfg.kind == "star" else BaselineSAModel(cfg, seed)


# --- functional surface ------------------------------------------------------


def embed_sequence(model: _Module, fs: FixedSequence) -> Tensor:
    """Embedding matrix (n, d) of one fixed-length sequence."""
    E = model.embed(fs)
    return ad.reshape(E, E.shape[1:])


def star_attention(model: StarModel, block_index: int, c_prev: Tensor, E: Tensor, mask: np.ndarray):
    """Single-sequence hub attention: c_prev (1, d), E (n, d) -> (g (1, d), [alpha (1, n)])."""
    g, alphas = model.star_attention(
        model.blocks[block_index],
        ad.reshape(c_prev, (1,) + c_prev.shape[-2:]),
        ad.reshape(E, (1,) + E.shape[-2:]),
        np.asarray(mask, dtype=bool)[None, :],
    )
    return ad.reshape(g, g.shape[1:]), [a[0] for a in alphas]


def feed_forward(model: _Module, block_index: int, g: Tensor) -> Tensor:
    return model.feed_forward(model.blocks[block_index], g)


def forward_star(model: StarModel, fs) -> ForwardTrace:
    return model.forward(fs)


def forward_baseline(model: BaselineSAModel, fs) -> ForwardTrace:
    return model.forward(fs)


def score(model: _Module, trace: ForwardTrace, uid, vids) -> Tensor:
    return model.score(trace, uid, vids)


def bce_loss(r_pos: Tensor, r_neg: Tensor) -> Tensor:
    """Summed -[log s(r_pos) + log(1 - s(r_neg))] via softplus, so it never hits log(0)."""
    return ad.total(ad.softplus(ad.scale(r_pos, -1.0))) + ad.total(ad.softplus(r_neg))


# --- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def build(self) -> StarModel | BaselineSAModel:
        model = build_model(self.config)
        model.load_state_dict(self.state)
        return model


def _zip_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    # fixed timestamp keeps checkpoint bytes reproducible
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write a zip container: ``header.json`` plus one ``.npy`` per parameter."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "meta": ckpt.meta,
        "parameters": {k: list(v.shape) for k, v in ckpt.state.items()},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_entry(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name in sorted(ckpt.state):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(ckpt.state[name]), allow_pickle=False)
            _zip_entry(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        state = {
            name: np.lib.format.read_array(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False)
            for name in header["parameters"]
        }
    return Checkpoint(ModelConfig(**header["config"]), state, header.get("meta", {}))
