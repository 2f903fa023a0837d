"""Transformer encoding, graph-attention pooling and long/short-term fusion.

All functions are batched: sequences come in as ``[B, n]`` padded id
matrices with a ``[B]`` vector of true lengths.  Parameters live in a flat
``dict[str, Tensor]`` keyed by dotted names (``enc0.wq``, ``pool.wo``...).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 128
    heads: int = 8
    layers: int = 1
    ff_mult: int = 4
    dropout: float = 0.0
    ln_eps: float = 1e-6
    init_scale: float = 0.1
    with_pe: bool = False   # sinusoidal positions before the encoder
    no_uli: bool = False    # zero long-term embedding for the target user only
    no_ali: bool = False    # zero long-term embedding everywhere
    no_gal: bool = False    # mean-pool + linear instead of social graph attention

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.layers < 0 or self.dim < 1:
            raise ValueError("layers must be >= 0 and dim >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(n_users: int, n_items: int, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of every trainable tensor; ``n_items`` excludes the padding row."""
    d, f = cfg.dim, cfg.dim * cfg.ff_mult
    shapes = {"item_emb": (n_items + 1, d), "user_emb": (n_users, d)}
    for layer in range(cfg.layers):
        p = f"enc{layer}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes[p + w] = (d, d)
        for b in ("bq", "bk", "bv", "bo", "ln1_b", "ln2_b", "ff2_b"):
            shapes[p + b] = (d,)
        shapes[p + "ln1_g"] = shapes[p + "ln2_g"] = (d,)
        shapes[p + "ff1_w"], shapes[p + "ff1_b"], shapes[p + "ff2_w"] = (d, f), (f,), (f, d)
    for p in ("pool.", "social."):
        shapes[p + "wq"] = shapes[p + "wk"] = shapes[p + "wo"] = (d, d)
        shapes[p + "bo"] = (d,)
    shapes["fuse.w"], shapes["fuse.b"] = (2 * d, d), (d,)
    if cfg.no_gal:
        shapes["gal.w"], shapes["gal.b"] = (2 * d, d), (d,)
    return shapes


def init_params(n_users: int, n_items: int, cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(n_users, n_items, cfg).items():
        leaf = name.split(".")[-1]
        if name.endswith("_emb"):
            vals = rng.normal(0.0, cfg.init_scale, size=shape)
            if name == "item_emb":
                vals[0] = 0.0
        elif leaf.endswith("_g"):
            vals = np.ones(shape)
        elif len(shape) == 1:
            vals = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            vals = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(vals, requires_grad=True, name=name)
    return params


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    return pe


def length_mask(lengths, n: int) -> np.ndarray:
    return np.arange(n)[None, :] < np.asarray(lengths)[:, None]


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, n, d] -> [B, heads, n, d/heads]"""
    b, n, d = x.shape
    return nx.transpose(nx.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return nx.mul(x, keep)


def transformer_encoder(ids, lengths, params: dict[str, Tensor], cfg: ModelConfig,
                        rng: np.random.Generator | None = None) -> Tensor:
    """Post-norm encoder stack over padded item ids; returns ``[B, n, d]``.

    Padded positions are excluded from every attention softmax and their
    output rows are zeroed.  ``rng`` enables dropout (training only).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
    if (lengths < 1).any():
        raise ValueError("every sequence needs true_len >= 1")
    bsz, n = ids.shape
    mask = length_mask(lengths, n)
    x = nx.embedding_lookup(params["item_emb"], ids)
    if cfg.with_pe:
        x = nx.add(x, sinusoidal_positions(n, cfg.dim))
    key_mask = mask[:, None, None, :]
    inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)
    for layer in range(cfg.layers):
        p = f"enc{layer}."
        q = _split_heads(_linear(x, params[p + "wq"], params[p + "bq"]), cfg.heads)
        k = _split_heads(_linear(x, params[p + "wk"], params[p + "bk"]), cfg.heads)
        v = _split_heads(_linear(x, params[p + "wv"], params[p + "bv"]), cfg.heads)
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        att = nx.matmul(nx.row_softmax(scores, key_mask), v)
        att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (bsz, n, cfg.dim))
        att = _dropout(_linear(att, params[p + "wo"], params[p + "bo"]), cfg.dropout, rng)
        x = nx.layer_norm(nx.add(x, att), params[p + "ln1_g"], params[p + "ln1_b"], cfg.ln_eps)
        ff = nx.relu(_linear(x, params[p + "ff1_w"], params[p + "ff1_b"]))
        ff = _dropout(_linear(ff, params[p + "ff2_w"], params[p + "ff2_b"]), cfg.dropout, rng)
        x = nx.layer_norm(nx.add(x, ff), params[p + "ln2_g"], params[p + "ln2_b"], cfg.ln_eps)
    return nx.mul(x, mask[:, :, None].astype(np.float64))


def mhgat(query: Tensor, neighbours: Tensor, params: dict[str, Tensor], cfg: ModelConfig,
          prefix: str = "pool.", mask=None, return_weights: bool = False):
    """Centre-node multi-head graph attention.

    ``query`` is ``[B, d]``, ``neighbours`` is ``[B, m, d]``.  Queries and
    keys are projected per head; values are the raw neighbour rows, head i
    reading columns ``[i*d_k, (i+1)*d_k)``.  Heads are concatenated and
    mapped through ``W^O`` plus ``b^O``.
    """
    bsz, m, d = neighbours.shape
    if m < 1:
        raise ValueError("mhgat needs at least one neighbour row")
    z, dk = cfg.heads, cfg.head_dim
    q = nx.reshape(nx.matmul(query, params[prefix + "wq"]), (bsz, z, 1, dk))
    k = nx.transpose(nx.reshape(nx.matmul(neighbours, params[prefix + "wk"]), (bsz, m, z, dk)),
                     (0, 2, 3, 1))
    scores = nx.scale(nx.matmul(q, k), 1.0 / math.sqrt(dk))
    weights = nx.row_softmax(scores, None if mask is None else np.asarray(mask)[:, None, None, :])
    v = nx.transpose(nx.reshape(neighbours, (bsz, m, z, dk)), (0, 2, 1, 3))
    heads = nx.reshape(nx.matmul(weights, v), (bsz, d))
    out = nx.add(nx.matmul(heads, params[prefix + "wo"]), params[prefix + "bo"])
    if return_weights:
        return out, weights.values[:, :, 0, :]
    return out


def tensor_fusion(h_s: Tensor, emb_u: Tensor, params: dict[str, Tensor]) -> Tensor:
    return nx.relu(_linear(nx.concat_last(h_s, emb_u), params["fuse.w"], params["fuse.b"]))


def tegaa_encode(users, ids, lengths, params: dict[str, Tensor], cfg: ModelConfig, *,
                 use_user: bool = True, rng: np.random.Generator | None = None) -> Tensor:
    """Fused long/short-term code for each row; returns ``[B, d]``.

    ``use_user=False`` substitutes a zero long-term embedding.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    users = np.atleast_1d(np.asarray(users, dtype=np.int64))
    lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
    if use_user:
        emb = nx.embedding_lookup(params["user_emb"], users)
    else:
        emb = nx.constant(np.zeros((len(users), cfg.dim)))
    tokens = transformer_encoder(ids, lengths, params, cfg, rng)
    h_s = mhgat(emb, tokens, params, cfg, "pool.", mask=length_mask(lengths, ids.shape[1]))
    return tensor_fusion(h_s, emb, params)
