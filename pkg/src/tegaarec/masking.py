"""Autoregressive (prefix, next item) expansion and padded batch assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import PAD_ITEM, Session


@dataclass(frozen=True)
class MaskedInstance:
    user: int
    input: tuple[int, ...]  # first true_len entries real, the rest PAD_ITEM
    true_len: int
    target: int

    @property
    def prefix(self) -> tuple[int, ...]:
        return self.input[:self.true_len]


@dataclass
class MaskedBatch:
    inputs: np.ndarray   # [B, n_max] int
    lengths: np.ndarray  # [B]
    targets: np.ndarray  # [B]
    users: np.ndarray    # [B]
    samples: list        # per-row NeighbourSample (shared object within a session)

    def __len__(self):
        return len(self.targets)


def expand_session(session: Session | Sequence[int], user: int | None = None) -> list[MaskedInstance]:
    """Session of n items -> n-1 instances; instance k sees items 1..k and predicts k+1."""
    if isinstance(session, Session):
        items, user = session.items, session.owner if user is None else user
    else:
        items = tuple(session)
    n = len(items)
    if n < 2:
        raise ValueError(f"need a session of length >= 2 to build targets, got {n}")
    width = n - 1
    return [MaskedInstance(user, tuple(items[:k]) + (PAD_ITEM,) * (width - k), k, items[k])
            for k in range(1, n)]


def pad_rows(rows: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad item rows with PAD_ITEM; rows longer than ``max_len`` keep their newest items."""
    if max_len is not None:
        rows = [r[-max_len:] for r in rows]
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    out = np.full((len(rows), int(lengths.max()) if len(rows) else 0), PAD_ITEM, dtype=np.int64)
    for b, r in enumerate(rows):
        out[b, :len(r)] = r
    return out, lengths


def assemble_batch(instances: Sequence[MaskedInstance], samples: Sequence, batch_size: int,
                   max_len: int = 50) -> list[MaskedBatch]:
    """Chunk instances (in order) into padded batches of at most ``batch_size`` rows.

    ``samples[j]`` is the neighbour sample for ``instances[j]``; passing the
    same object for every sub-instance of a session keeps them sharing it.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    out = []
    for lo in range(0, len(instances), batch_size):
        chunk = instances[lo:lo + batch_size]
        inputs, lengths = pad_rows([x.prefix for x in chunk], max_len)
        out.append(MaskedBatch(
            inputs, lengths,
            np.array([x.target for x in chunk], dtype=np.int64),
            np.array([x.user for x in chunk], dtype=np.int64),
            list(samples[lo:lo + batch_size])))
    return out
