import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tegaarec import numerics as nx
from tegaarec.data import parse_events, reindex_split, segment_weekly, split_holdout
from tegaarec.synth import SynthSpec, generate


@pytest.fixture(autouse=True)
def fresh_tape():
    nx.reset_tape()
    yield
    nx.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def synth_split(holdout=4, **kw):
    spec = SynthSpec(**kw)
    d = generate(spec)
    events, edges = parse_events(d.events_tsv, d.edges_tsv)
    split, umap, imap = reindex_split(split_holdout(segment_weekly(events, edges), holdout, 0))
    return split, umap, imap


@pytest.fixture(scope="session")
def small_split():
    return synth_split(num_users=40, num_items=24, num_clusters=3, sessions_per_user=6, num_weeks=16,
                       max_session_len=4, seed=3)


CRITERIA: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion; the line is printed and summarised."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
