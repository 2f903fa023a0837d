"""Like-minded-peer and social-friend mining plus fixed-size neighbour sampling.

A user's history "before" a target session means every session of theirs
in a week strictly earlier than the target session's week.  That aligns
all users on wall-clock time so no neighbour contributes information from
the future.
"""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .data import Session, SessionStore


@dataclass(frozen=True)
class ItemUserIndex:
    """item -> {user: earliest week the user interacted with it}."""

    first_week: dict[int, dict[int, int]]
    # per user: ascending session weeks, aligned with store.sessions[user]
    weeks: dict[int, list[int]] = field(repr=False)

    @classmethod
    def build(cls, store: SessionStore) -> "ItemUserIndex":
        first: dict[int, dict[int, int]] = defaultdict(dict)
        weeks = {}
        for u in sorted(store.sessions):
            ss = store.sessions[u]
            weeks[u] = [s.week for s in ss]
            for s in ss:
                for i in s.items:
                    first[i].setdefault(u, s.week)
        return cls(dict(first), weeks)

    def has_history(self, user: int, before_week: int) -> bool:
        w = self.weeks.get(user)
        return bool(w) and w[0] < before_week


def lmp_candidates(store: SessionStore, index: ItemUserIndex, target: int,
                   current_items, before_week: int) -> set[int]:
    """Users other than ``target`` who touched any current item before ``before_week``."""
    out = set()
    for i in set(current_items):
        for u, w in index.first_week.get(i, {}).items():
            if w < before_week and u != target:
                out.add(u)
    return out


def friend_candidates(store: SessionStore, index: ItemUserIndex, target: int,
                      before_week: int) -> set[int]:
    """Social neighbours of ``target`` with at least one session before ``before_week``."""
    return {u for u in store.friends(target) if u != target and index.has_history(u, before_week)}


def shared_item_counts(index: ItemUserIndex, candidates, current_items, before_week: int) -> dict[int, int]:
    cur = set(current_items)
    counts = dict.fromkeys(candidates, 0)
    for i in cur:
        for u, w in index.first_week.get(i, {}).items():
            if u in counts and w < before_week:
                counts[u] += 1
    return counts


def sample_fixed(candidates, L: int, rng: np.random.Generator,
                 weights: dict[int, float] | None = None) -> list[int]:
    """Draw exactly ``L`` users, topping up with duplicates when short.

    With ``L`` or more candidates the draw is without replacement.  With
    fewer, every candidate appears once and the remaining slots are filled
    uniformly with replacement.  No candidates gives an empty list.
    ``weights`` switches both draws to be proportional to the weights.
    """
    if L < 1:
        raise ValueError(f"sample size must be >= 1, got {L}")
    pool = sorted(candidates)
    if not pool:
        return []
    p = None
    if weights is not None:
        w = np.array([float(weights[u]) for u in pool])
        p = w / w.sum()
    if len(pool) >= L:
        picks = rng.choice(len(pool), size=L, replace=False, p=p)
        return [pool[k] for k in picks]
    extra = rng.choice(len(pool), size=L - len(pool), replace=True, p=p)
    out = pool + [pool[k] for k in extra]
    return [out[k] for k in rng.permutation(L)]


def latest_session(store: SessionStore, index: ItemUserIndex, user: int,
                   before_week: int) -> Session | None:
    w = index.weeks.get(user)
    if not w:
        return None
    k = bisect.bisect_left(w, before_week)
    return store.sessions[user][k - 1] if k else None


def history_items(store: SessionStore, index: ItemUserIndex, user: int, before_week: int,
                  mode: str = "last", max_len: int = 50) -> tuple[int, ...]:
    """Items that represent a neighbour: its latest session, or all history concatenated."""
    if mode == "last":
        s = latest_session(store, index, user, before_week)
        items = s.items if s is not None else ()
    elif mode == "all_concat":
        k = bisect.bisect_left(index.weeks.get(user, []), before_week)
        items = tuple(i for s in store.sessions.get(user, ())[:k] for i in s.items)
    else:
        raise ValueError(f"unknown neighbour_history mode {mode!r}")
    return items[-max_len:]


@dataclass(frozen=True)
class NeighbourSample:
    """Sampled neighbours for one (target user, current session) pair.

    ``histories`` maps each sampled neighbour to the items encoded for it.
    The LMP and friend quotas are independent, so a user can occupy slots in
    both lists.
    """

    target: int
    lmp: tuple[int, ...]
    friends: tuple[int, ...]
    before_week: int
    histories: dict[int, tuple[int, ...]] = field(compare=False, repr=False)

    @property
    def members(self) -> tuple[int, ...]:
        return self.lmp + self.friends

    def __len__(self):
        return len(self.lmp) + len(self.friends)


def build_sample(store: SessionStore, index: ItemUserIndex, target: int, current_items,
                 before_week: int, L_l: int, L_s: int, rng: np.random.Generator, *,
                 use_lmp: bool = True, use_friends: bool = True, volume_weighted: bool = False,
                 neighbour_history: str = "last", max_len: int = 50) -> NeighbourSample:
    lmp: list[int] = []
    friends: list[int] = []
    if use_lmp:
        cands = lmp_candidates(store, index, target, current_items, before_week)
        weights = shared_item_counts(index, cands, current_items, before_week) if volume_weighted else None
        lmp = sample_fixed(cands, L_l, rng, weights)
    if use_friends:
        friends = sample_fixed(friend_candidates(store, index, target, before_week), L_s, rng)
    hist = {u: history_items(store, index, u, before_week, neighbour_history, max_len)
            for u in set(lmp) | set(friends)}
    return NeighbourSample(target, tuple(lmp), tuple(friends), before_week, hist)


def export_rows(user: int, session_index: int, sample: NeighbourSample) -> list[str]:
    """TSV rows ``user, session_index, kind, neighbour`` for offline inspection."""
    rows = [f"{user}\t{session_index}\tlmp\t{u}" for u in sample.lmp]
    rows += [f"{user}\t{session_index}\tsf\t{u}" for u in sample.friends]
    return rows


@dataclass(frozen=True)
class SamplerConfig:
    L_l: int = 15
    L_s: int = 25
    use_lmp: bool = True
    use_friends: bool = True
    volume_weighted: bool = False
    neighbour_history: str = "last"
    max_len: int = 50


def sample_for_session(store: SessionStore, index: ItemUserIndex, session: Session,
                       cfg: SamplerConfig, rng: np.random.Generator) -> NeighbourSample:
    """Neighbours for ``session`` (whose owner is the target), using history before its week."""
    return build_sample(store, index, session.owner, session.items, session.week, cfg.L_l, cfg.L_s, rng,
                        use_lmp=cfg.use_lmp, use_friends=cfg.use_friends,
                        volume_weighted=cfg.volume_weighted,
                        neighbour_history=cfg.neighbour_history, max_len=cfg.max_len)
