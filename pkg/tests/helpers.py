"""Small builders shared by several test modules."""

import numpy as np

from tegaarec.data import WEEK_SECONDS, Event, segment_weekly


def random_store(rng: np.random.Generator, n_users=12, n_items=15, n_weeks=8, n_events=120, edge_p=0.2):
    events = [Event(int(rng.integers(n_users)), int(rng.integers(1, n_items + 1)),
                    int(rng.integers(n_weeks * WEEK_SECONDS))) for _ in range(n_events)]
    edges = [(a, b) for a in range(n_users) for b in range(a + 1, n_users) if rng.random() < edge_p]
    return segment_weekly(events, edges)


def store_from(spec: dict, edges=()):
    """``{user: [(week, [items]), ...]}`` -> SessionStore."""
    events = []
    for u, sessions in spec.items():
        for week, items in sessions:
            events += [Event(u, i, week * WEEK_SECONDS + k) for k, i in enumerate(items)]
    return segment_weekly(events, edges)
