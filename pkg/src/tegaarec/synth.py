"""Synthetic sessions with planted preference clusters and preference-blind social edges."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import WEEK_SECONDS


@dataclass(frozen=True)
class SynthSpec:
    num_users: int = 200
    num_items: int = 50
    num_clusters: int = 4
    sessions_per_user: int = 8
    min_session_len: int = 2
    max_session_len: int = 6
    alpha: float = 0.9          # chance a session item comes from the session's cluster pool
    beta: float = 0.8           # chance a social edge crosses clusters
    num_weeks: int = 40
    edges_per_user: int = 2
    pool_overlap: float = 0.0   # fraction of the next cluster's pool shared into each pool
    home_affinity: float = 1.0  # chance a session follows the user's own cluster
    trend_size: int = 0         # > 0: draw from a per-cluster subset redrawn every trend_weeks
    trend_weeks: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if not 0.0 <= self.home_affinity <= 1.0 or not 0.0 <= self.pool_overlap <= 1.0:
            raise ValueError("home_affinity and pool_overlap must be in [0, 1]")
        if self.num_items < self.num_clusters:
            raise ValueError("need at least one item per cluster")
        if not 1 <= self.min_session_len <= self.max_session_len:
            raise ValueError("need 1 <= min_session_len <= max_session_len")
        if self.trend_size < 0 or self.trend_weeks < 1:
            raise ValueError("trend_size must be >= 0 and trend_weeks >= 1")
        if self.sessions_per_user > self.num_weeks:
            raise ValueError("sessions_per_user cannot exceed num_weeks (one session per week)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthData:
    events_tsv: str
    edges_tsv: str
    clusters_tsv: str
    clusters: dict[int, int]
    pools: list[list[int]]


def cluster_pools(spec: SynthSpec) -> list[list[int]]:
    """Contiguous item blocks per cluster, optionally widened into the next block."""
    bounds = np.linspace(1, spec.num_items + 1, spec.num_clusters + 1).round().astype(int)
    blocks = [list(range(bounds[c], bounds[c + 1])) for c in range(spec.num_clusters)]
    if spec.pool_overlap <= 0 or spec.num_clusters == 1:
        return blocks
    pools = []
    for c, block in enumerate(blocks):
        nxt = blocks[(c + 1) % spec.num_clusters]
        pools.append(block + nxt[:int(round(spec.pool_overlap * len(nxt)))])
    return pools


def generate(spec: SynthSpec) -> SynthData:
    rng = np.random.default_rng(spec.seed)
    n, c = spec.num_users, spec.num_clusters
    cluster_of = {u: int(k) for u, k in enumerate(rng.permutation(n) % c)}
    members = [[u for u in range(n) if cluster_of[u] == k] for k in range(c)]
    pools = cluster_pools(spec)
    trends = {}

    def source(cluster: int, week: int) -> list[int]:
        if spec.trend_size <= 0:
            return pools[cluster]
        # blocks are aligned to the last week so the final block straddles any short holdout
        block = (spec.num_weeks - 1 - week) // spec.trend_weeks
        key = (cluster, block)
        if key not in trends:
            pool = pools[cluster]
            size = min(spec.trend_size, len(pool))
            trends[key] = sorted(pool[k] for k in trend_rng.choice(len(pool), size=size, replace=False))
        return trends[key]

    trend_rng = np.random.default_rng([spec.seed, 1])
    events = []
    for u in range(n):
        weeks = np.sort(rng.choice(spec.num_weeks, size=spec.sessions_per_user, replace=False))
        for w in weeks:
            home = cluster_of[u] if rng.random() < spec.home_affinity else int(rng.integers(c))
            length = int(rng.integers(spec.min_session_len, spec.max_session_len + 1))
            offsets = np.sort(rng.choice(WEEK_SECONDS, size=length, replace=False))
            for off in offsets:
                if rng.random() < spec.alpha:
                    src = source(home, int(w))
                    item = src[int(rng.integers(len(src)))]
                else:
                    item = int(rng.integers(1, spec.num_items + 1))
                events.append((u, item, int(w) * WEEK_SECONDS + int(off)))

    edges = set()
    for u in range(n):
        own = cluster_of[u]
        for _ in range(spec.edges_per_user):
            if c > 1 and rng.random() < spec.beta:
                other = [k for k in range(c) if k != own]
                pool = members[other[int(rng.integers(len(other)))]]
            else:
                pool = [v for v in members[own] if v != u]
            if not pool:
                continue
            v = pool[int(rng.integers(len(pool)))]
            edges.add((min(u, v), max(u, v)))

    events_tsv = "".join(f"{u}\t{i}\t{t}\n" for u, i, t in events)
    edges_tsv = "".join(f"{a}\t{b}\n" for a, b in sorted(edges))
    clusters_tsv = "".join(f"{u}\t{cluster_of[u]}\n" for u in range(n))
    return SynthData(events_tsv, edges_tsv, clusters_tsv, cluster_of, pools)
