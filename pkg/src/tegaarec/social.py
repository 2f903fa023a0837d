"""Social aggregation over neighbour codes and full-catalogue item scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .tegaa import ModelConfig, mhgat


def aggregate(target: Tensor, neighbours: Tensor | None, params: dict[str, Tensor],
              cfg: ModelConfig, mask=None, return_weights: bool = False):
    """Attend from each target code over its neighbours plus itself.

    ``target`` is ``[B, d]``; ``neighbours`` is ``[B, m, d]`` (or None for
    m = 0) with an optional ``[B, m]`` validity mask.  The target row is
    appended as the last node, so every row has at least one valid node.
    """
    bsz, d = target.shape
    self_row = nx.reshape(target, (bsz, 1, d))
    if neighbours is None or neighbours.shape[1] == 0:
        nodes, full_mask = self_row, None
    else:
        nodes = nx.concat([neighbours, self_row], axis=1)
        full_mask = None
        if mask is not None:
            full_mask = np.concatenate([np.asarray(mask, dtype=bool), np.ones((bsz, 1), bool)], axis=1)
    return mhgat(target, nodes, params, cfg, "social.", mask=full_mask, return_weights=return_weights)


def concat_pool(target: Tensor, neighbours: Tensor | None, params: dict[str, Tensor], mask=None) -> Tensor:
    """Attention-free variant: masked mean of neighbour codes joined to the target code."""
    bsz, d = target.shape
    if neighbours is None or neighbours.shape[1] == 0:
        pooled = nx.constant(np.zeros((bsz, d)))
    else:
        m = np.ones(neighbours.shape[:2]) if mask is None else np.asarray(mask, dtype=np.float64)
        counts = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
        weights = (m / counts)[:, None, :]
        pooled = nx.reshape(nx.matmul(weights, neighbours), (bsz, d))
    return nx.add(nx.matmul(nx.concat_last(pooled, target), params["gal.w"]), params["gal.b"])


def item_logits(h: Tensor, item_table: Tensor) -> Tensor:
    """Dot-product logits against every real item; column j scores item j+1."""
    real = nx.embedding_lookup(item_table, np.arange(1, item_table.shape[0]))
    return nx.matmul(h, nx.transpose(real, (1, 0)))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Item ids (1-based) of the k best scores; ties go to the lower id."""
    scores = np.asarray(scores)
    order = np.lexsort((np.arange(scores.shape[-1]), -scores))
    return order[:k] + 1


def target_rank(scores: np.ndarray, target: int) -> int:
    """1-based rank of ``target`` under the same ordering as :func:`top_k`."""
    s = scores[target - 1]
    ahead = np.count_nonzero(scores > s) + np.count_nonzero(scores[:target - 1] == s)
    return int(ahead) + 1


@dataclass(frozen=True)
class ScoredRanking:
    scores: np.ndarray  # [V], index j scores item j+1

    @property
    def probabilities(self) -> np.ndarray:
        z = self.scores - self.scores.max()
        e = np.exp(z)
        return e / e.sum()

    def top(self, k: int) -> np.ndarray:
        return top_k(self.scores, k)

    def rank_of(self, item: int) -> int:
        return target_rank(self.scores, item)


def score_items(h, item_table) -> ScoredRanking:
    h = nx.constant(np.asarray(getattr(h, "values", h), dtype=np.float64).reshape(1, -1))
    table = item_table if isinstance(item_table, Tensor) else nx.constant(item_table)
    with nx.no_grad():
        return ScoredRanking(item_logits(h, table).values[0])
