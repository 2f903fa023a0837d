"""Recall@K / NDCG@K and split-level evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import EvalInstance, SessionStore
from .masking import assemble_batch, expand_session
from .neighbours import ItemUserIndex, SamplerConfig, sample_for_session
from .social import target_rank


def recall_at_k(ranking: Sequence[int], target: int, k: int) -> int:
    return int(target in list(ranking[:k]))


def ndcg_at_k(ranking: Sequence[int], target: int, k: int) -> float:
    # one relevant item, so the ideal DCG is 1
    ranking = list(ranking[:k])
    if target not in ranking:
        return 0.0
    return 1.0 / math.log2(ranking.index(target) + 2)


def recall_from_rank(rank: int, k: int) -> int:
    return int(rank <= k)


def ndcg_from_rank(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class EvalResult:
    recall: dict[int, float]
    ndcg: dict[int, float]
    count: int
    ranks: list[int] = field(default_factory=list, repr=False)

    def summary(self, title: str = "evaluation") -> str:
        lines = [f"== {title} ({self.count} predictions) =="]
        lines += [f"R@{k}: {100 * v:.2f}" for k, v in sorted(self.recall.items())]
        lines += [f"N@{k}: {100 * v:.2f}" for k, v in sorted(self.ndcg.items())]
        return "\n".join(lines)

    def tsv_header(self) -> str:
        cols = [f"R@{k}" for k in sorted(self.recall)] + [f"N@{k}" for k in sorted(self.ndcg)]
        return "\t".join(["split", "count"] + cols)

    def tsv_row(self, split: str) -> str:
        vals = [self.recall[k] for k in sorted(self.recall)] + [self.ndcg[k] for k in sorted(self.ndcg)]
        return "\t".join([split, str(self.count)] + [f"{100 * v:.2f}" for v in vals])


def metrics_from_ranks(ranks: Sequence[int], ks=(10, 20), ndcg_ks=(20,)) -> EvalResult:
    n = len(ranks)
    r = np.asarray(ranks)
    recall = {k: float(np.mean(r <= k)) if n else 0.0 for k in ks}
    ndcg = {k: float(np.mean([ndcg_from_rank(x, k) for x in ranks])) if n else 0.0 for k in ndcg_ks}
    return EvalResult(recall, ndcg, n, list(map(int, ranks)))


def training_instances_as_eval(store: SessionStore) -> list[EvalInstance]:
    """Every session with earlier history and length >= 2, as evaluation instances."""
    return [EvalInstance(s.owner, s, "train")
            for u in sorted(store.sessions) for s in store.sessions[u][1:] if len(s) >= 2]


def evaluate(instances: Sequence[EvalInstance], model, history: SessionStore,
             index: ItemUserIndex | None, sampler: SamplerConfig, seed: int, *,
             ks=(10, 20), ndcg_ks=(20,), eval_prefixes: str = "all", batch_size: int = 256,
             dump: list | None = None) -> EvalResult:
    """Score every (prefix, next item) pair of every instance.

    Neighbours are drawn once per instance from ``history`` with an rng
    seeded by ``(seed, position)``, so results do not depend on batching.
    ``dump`` (a list) receives ``(instance position, k, target, scores)``.
    """
    if eval_prefixes not in ("all", "last"):
        raise ValueError(f"eval_prefixes must be 'all' or 'last', got {eval_prefixes!r}")
    index = index or ItemUserIndex.build(history)
    rows, samples, owners = [], [], []
    for pos, inst in enumerate(instances):
        sample = sample_for_session(history, index, inst.session, sampler,
                                    np.random.default_rng([seed, pos]))
        subs = expand_session(inst.session)
        if eval_prefixes == "last":
            subs = subs[-1:]
        rows += subs
        samples += [sample] * len(subs)
        owners += [pos] * len(subs)
    ranks = []
    for lo, batch in zip(range(0, len(rows), batch_size),
                         assemble_batch(rows, samples, batch_size, sampler.max_len)):
        scores = model.scores(batch)
        for j, (s, t) in enumerate(zip(scores, batch.targets)):
            ranks.append(target_rank(s, int(t)))
            if dump is not None:
                dump.append((owners[lo + j], int(batch.lengths[j]), int(t), s.copy()))
    return metrics_from_ranks(ranks, ks, ndcg_ks)
