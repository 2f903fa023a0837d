"""Event ingestion, weekly sessionisation and the holdout split."""

from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

WEEK_SECONDS = 604800
PAD_ITEM = 0


class IngestError(ValueError):
    """A raw input line could not be parsed."""


class ConfigError(ValueError):
    """Requested configuration cannot be satisfied by the data."""


@dataclass(frozen=True)
class Event:
    user: int
    item: int
    timestamp: int


@dataclass(frozen=True)
class Session:
    owner: int
    index: int  # 1-based position in the owner's chronology
    items: tuple[int, ...]
    week: int

    def __len__(self):
        return len(self.items)


@dataclass
class SessionStore:
    """Per-user chronological sessions plus an undirected social graph."""

    sessions: dict[int, tuple[Session, ...]]
    edges: frozenset[tuple[int, int]] = frozenset()
    users: frozenset[int] = field(init=False)
    items: frozenset[int] = field(init=False)
    adjacency: dict[int, frozenset[int]] = field(init=False, repr=False)

    def __post_init__(self):
        self.users = frozenset(self.sessions)
        self.items = frozenset(i for ss in self.sessions.values() for s in ss for i in s.items)
        adj = defaultdict(set)
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        self.adjacency = {u: frozenset(v) for u, v in adj.items()}

    def user_sessions(self, user: int) -> tuple[Session, ...]:
        return self.sessions.get(user, ())

    def friends(self, user: int) -> frozenset[int]:
        return self.adjacency.get(user, frozenset())

    def n_events(self) -> int:
        return sum(len(s) for ss in self.sessions.values() for s in ss)

    def all_sessions(self) -> Iterable[Session]:
        for u in sorted(self.sessions):
            yield from self.sessions[u]


@dataclass(frozen=True)
class EvalInstance:
    """A held-out session scored against the training history of its owner."""

    user: int
    session: Session
    split: str  # "valid" | "test"


@dataclass
class DatasetSplit:
    train: SessionStore
    valid: list[EvalInstance]
    test: list[EvalInstance]
    holdout_weeks: int
    cutoff_week: int  # last training week (inclusive)


# ---------------------------------------------------------------- parsing

def _int_field(text: str, lineno: int, col: int, path: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise IngestError(f"{path}line {lineno}, column {col}: cannot parse {text!r} as an integer") from None


def parse_events(event_text: str, edge_text: str = "", *, source: str = ""
                 ) -> tuple[list[Event], frozenset[tuple[int, int]]]:
    """Parse ``user\\titem\\ttimestamp`` and ``user\\tuser`` TSV text.

    Blank lines are skipped.  Edges are undirected; duplicates and self loops
    are dropped.  The first malformed line raises :class:`IngestError`.
    """
    prefix = f"{source}: " if source else ""
    events = []
    for lineno, line in enumerate(event_text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.rstrip("\r").split("\t")
        if len(cols) != 3:
            raise IngestError(f"{prefix}line {lineno}: expected 3 tab-separated fields, got {len(cols)}")
        u, i, ts = (_int_field(c, lineno, k, prefix) for k, c in enumerate(cols, 1))
        if u < 0 or i < 1 or ts < 0:
            raise IngestError(f"{prefix}line {lineno}: need user >= 0, item >= 1, timestamp >= 0")
        events.append(Event(u, i, ts))
    edges = set()
    for lineno, line in enumerate(edge_text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.rstrip("\r").split("\t")
        if len(cols) != 2:
            raise IngestError(f"{prefix}edges line {lineno}: expected 2 tab-separated fields, got {len(cols)}")
        a, b = (_int_field(c, lineno, k, prefix) for k, c in enumerate(cols, 1))
        if a != b:
            edges.add((min(a, b), max(a, b)))
    return events, frozenset(edges)


# ---------------------------------------------------------------- sessions

def segment_weekly(events: Iterable[Event], edges: Iterable[tuple[int, int]] = ()) -> SessionStore:
    """Group each user's events into fixed 7-day buckets, one session per bucket."""
    by_user: dict[int, list[Event]] = defaultdict(list)
    for e in events:
        by_user[e.user].append(e)
    sessions = {}
    for u, evs in by_user.items():
        # item id breaks timestamp ties so the result ignores input order
        evs.sort(key=lambda e: (e.timestamp, e.item))
        weeks: dict[int, list[int]] = {}
        for e in evs:
            weeks.setdefault(e.timestamp // WEEK_SECONDS, []).append(e.item)
        sessions[u] = tuple(
            Session(u, t, tuple(items), w)
            for t, (w, items) in enumerate(sorted(weeks.items()), 1))
    return SessionStore(sessions, frozenset((min(a, b), max(a, b)) for a, b in edges if a != b))


def split_holdout(store: SessionStore, s: int, seed: int) -> DatasetSplit:
    """Hold out every session in the final ``s`` weeks for evaluation.

    Held-out items never seen in training are removed; sessions left shorter
    than 2 or whose owner has no training history are dropped.  The surviving
    pool is shuffled with ``seed`` and cut in half (valid gets the extra one
    when the pool is odd).
    """
    if s < 1:
        raise ConfigError(f"holdout weeks must be >= 1, got {s}")
    all_weeks = [x.week for x in store.all_sessions()]
    if not all_weeks:
        raise ConfigError("store has no sessions")
    cutoff = max(all_weeks) - s
    train_sessions = {}
    pool = []
    for u in sorted(store.sessions):
        kept = tuple(x for x in store.sessions[u] if x.week <= cutoff)
        if kept:
            train_sessions[u] = kept
        pool.extend(x for x in store.sessions[u] if x.week > cutoff)
    if not train_sessions:
        raise ConfigError(f"holdout of {s} weeks leaves no training sessions")
    train = SessionStore(train_sessions, store.edges)
    vocab = train.items
    usable = []
    for x in pool:
        items = tuple(i for i in x.items if i in vocab)
        if len(items) >= 2 and x.owner in train.sessions:
            usable.append(Session(x.owner, x.index, items, x.week))
    random.Random(seed).shuffle(usable)
    half = (len(usable) + 1) // 2
    valid = sorted(usable[:half], key=lambda x: (x.owner, x.index))
    test = sorted(usable[half:], key=lambda x: (x.owner, x.index))
    return DatasetSplit(
        train,
        [EvalInstance(x.owner, x, "valid") for x in valid],
        [EvalInstance(x.owner, x, "test") for x in test],
        s, cutoff)


# ---------------------------------------------------------------- id maps

@dataclass(frozen=True)
class IdMap:
    """Raw id <-> dense id.  Item dense ids start at 1 (0 is padding)."""

    to_dense: dict[int, int]

    @property
    def to_raw(self) -> dict[int, int]:
        return {v: k for k, v in self.to_dense.items()}

    def __len__(self):
        return len(self.to_dense)


def reindex(store: SessionStore) -> tuple[SessionStore, IdMap, IdMap]:
    """Relabel users as 0..U-1 and items as 1..V, both in raw-id order.

    Edges touching users outside the store are dropped.
    """
    umap = IdMap({u: k for k, u in enumerate(sorted(store.users))})
    imap = IdMap({i: k for k, i in enumerate(sorted(store.items), 1)})
    return apply_maps(store, umap, imap), umap, imap


def apply_maps(store: SessionStore, umap: IdMap, imap: IdMap) -> SessionStore:
    u, i = umap.to_dense, imap.to_dense
    sessions = {
        u[owner]: tuple(Session(u[owner], x.index, tuple(i[j] for j in x.items), x.week) for x in ss)
        for owner, ss in store.sessions.items()}
    edges = frozenset(
        (min(u[a], u[b]), max(u[a], u[b])) for a, b in store.edges if a in u and b in u)
    return SessionStore(sessions, edges)


def reindex_split(split: DatasetSplit) -> tuple[DatasetSplit, IdMap, IdMap]:
    """Reindex against the training vocabulary and carry the eval sets along."""
    train, umap, imap = reindex(split.train)

    def move(inst: EvalInstance) -> EvalInstance:
        x = inst.session
        owner = umap.to_dense[x.owner]
        return EvalInstance(owner, Session(owner, x.index, tuple(imap.to_dense[j] for j in x.items), x.week),
                            inst.split)

    return (DatasetSplit(train, [move(e) for e in split.valid], [move(e) for e in split.test],
                         split.holdout_weeks, split.cutoff_week), umap, imap)


def store_stats(store: SessionStore, n_eval_events: int = 0) -> dict[str, float]:
    """Counts and averages describing a store."""
    n_sessions = sum(len(ss) for ss in store.sessions.values())
    n_users = len(store.users)
    events = store.n_events()
    return {
        "users": n_users,
        "items": len(store.items),
        "events": events + n_eval_events,
        "social_links": len(store.edges),
        "sessions": n_sessions,
        "avg_friends_per_user": 2 * len(store.edges) / n_users if n_users else 0.0,
        "avg_events_per_user": events / n_users if n_users else 0.0,
        "avg_session_length": events / n_sessions if n_sessions else 0.0,
    }
