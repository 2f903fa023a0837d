import copy
import math
from dataclasses import replace

import numpy as np
import pytest

from tegaarec import numerics as nx
from tegaarec.masking import MaskedInstance
from tegaarec.metrics import evaluate
from tegaarec.model import forward_instance
from tegaarec.neighbours import ItemUserIndex
from tegaarec.trainer import (EpochRecord, TrainConfig, TrainReport, epoch_batches, fit, grid_cells, grid_search,
                              new_state, popularity_baseline, run_epoch, training_instances, training_sessions)

from helpers import store_from

TINY = TrainConfig(dim=8, heads=2, L_l=3, L_s=3, batch_size=16, max_epochs=3, patience=5, lr=0.01, warmup=2)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(L_l=0)
    with pytest.raises(ValueError):
        TrainConfig(grid_lr=())
    with pytest.raises(ValueError):
        TrainConfig(warmup_unit="week")
    assert TrainConfig.from_dict(TINY.to_dict()) == TINY


def test_default_grid_space():
    cfg = TrainConfig()
    assert cfg.grid_lr == (0.01, 0.005, 0.0001, 0.00005)
    assert cfg.grid_L_l == (5, 15, 25) and cfg.grid_L_s == (25, 50)
    assert cfg.grid_layers == (1, 3, 5) and cfg.grid_warmup == (5, 10, 20) and cfg.grid_patience == (10, 20)
    assert cfg.batch_size == 50


class TestInstances:
    def test_single_session_user_contributes_nothing(self):
        store = store_from({0: [(0, [1, 2, 3])], 1: [(0, [1, 2]), (1, [2, 3, 4])]})
        sessions = training_sessions(store)
        assert [(s.owner, s.index) for s in sessions] == [(1, 2)]

    def test_enumeration_matches_bruteforce(self, small_split):
        store = small_split[0].train
        brute = sorted((u, t) for u, ss in store.sessions.items() for t, s in enumerate(ss, 1)
                       if t >= 2 and len(s.items) >= 2)
        got = sorted((s.owner, s.index) for s in training_instances(store, 0, 1))
        assert got == brute

    def test_shuffle_depends_on_epoch(self, small_split):
        store = small_split[0].train
        a = [s.index + 1000 * s.owner for s in training_instances(store, 0, 1)]
        assert a == [s.index + 1000 * s.owner for s in training_instances(store, 0, 1)]
        assert a != [s.index + 1000 * s.owner for s in training_instances(store, 0, 2)]


class TestEpoch:
    def test_zero_lr_leaves_params(self, small_split):
        split = small_split[0]
        cfg = replace(TINY, lr=0.0)
        state = new_state(split, cfg)
        before = state.model.state()
        run_epoch(split.train, ItemUserIndex.build(split.train), state, cfg)
        for k, v in state.model.state().items():
            np.testing.assert_array_equal(v, before[k])

    def test_step_count(self, small_split):
        split = small_split[0]
        state = new_state(split, TINY)
        idx = ItemUserIndex.build(split.train)
        n = sum(len(s) - 1 for s in training_sessions(split.train))
        for _ in range(2):
            run_epoch(split.train, idx, state, TINY)
        assert state.global_step == 2 * math.ceil(n / TINY.batch_size)

    def test_loss_matches_per_instance_probabilities(self, small_split):
        split = small_split[0]
        cfg = replace(TINY, lr=0.0)
        state = new_state(split, cfg)
        idx = ItemUserIndex.build(split.train)
        logp = []
        for batch in epoch_batches(split.train, idx, cfg, 1):
            for b in range(len(batch)):
                k = int(batch.lengths[b])
                inst = MaskedInstance(int(batch.users[b]), tuple(batch.inputs[b, :k]), k, int(batch.targets[b]))
                logp.append(math.log(forward_instance(state.model, inst, batch.samples[b])[1]))
        loss = run_epoch(split.train, idx, state, cfg)
        assert loss == pytest.approx(-np.mean(logp), abs=1e-9)

    def test_single_instance_loss_decreases(self):
        store = store_from({0: [(0, [1, 2]), (1, [3, 4])], 1: [(0, [3])]})
        from tegaarec.data import DatasetSplit
        split = DatasetSplit(store, [], [], 1, 1)
        cfg = replace(TINY, warmup=1, batch_size=1, lr=0.01)
        state = new_state(split, cfg)
        idx = ItemUserIndex.build(store)
        losses = [run_epoch(store, idx, state, cfg) for _ in range(20)]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_deterministic_trajectory(self, small_split):
        split = small_split[0]
        cfg = replace(TINY, seed=7, max_epochs=2)
        a = fit(split, cfg)
        b = fit(split, cfg)
        assert [e.loss for e in a.report.epochs] == [e.loss for e in b.report.epochs]
        for k, v in a.model.state().items():
            assert np.array_equal(v, b.model.state()[k])

    def test_nonfinite_loss_aborts(self, small_split):
        split = small_split[0]
        state = new_state(split, TINY)
        state.model.params["item_emb"].values = state.model.params["item_emb"].values * 1e200
        with pytest.raises(nx.NumericError, match=r"epoch 1, batch \d+, lr 0.01"), np.errstate(all="ignore"):
            run_epoch(split.train, ItemUserIndex.build(split.train), state, TINY)


class TestFit:
    def test_frozen_validation_stops_at_three(self, small_split):
        state = fit(small_split[0], replace(TINY, lr=0.0, patience=2, max_epochs=50))
        assert state.report.stop_reason == "early_stop"
        assert [e.epoch for e in state.report.epochs] == [1, 2, 3] and state.report.best_epoch == 1

    def test_best_epoch_restored(self, small_split):
        state = fit(small_split[0], replace(TINY, max_epochs=4))
        rep = state.report
        best = max(rep.epochs, key=lambda e: (e.valid_recall20, e.valid_ndcg20, -e.epoch))
        assert rep.best_epoch == best.epoch <= rep.epochs[-1].epoch
        assert [e.epoch for e in rep.epochs] == list(range(1, len(rep.epochs) + 1))
        np.testing.assert_array_equal(state.model.state()["fuse.w"], state.best_state["fuse.w"])

    def test_report_round_trip(self):
        rep = TrainReport([EpochRecord(1, 2.0, 0.1, 3, 0.5, 0.25)], 1, 0.5, 0.25, "max_epochs", {"lr": 0.1})
        back = TrainReport.from_lines(rep.to_lines())
        assert back == rep

    def test_resume_matches_uninterrupted(self, small_split):
        split = small_split[0]
        cfg = replace(TINY, max_epochs=4, patience=10)
        full = fit(split, cfg)
        saved = {}
        fit(split, cfg, on_epoch=lambda st: saved.setdefault("s", copy.deepcopy(st)) if st.epoch == 2 else None)
        resumed = fit(split, cfg, state=saved["s"])
        assert [e.loss for e in resumed.report.epochs] == [e.loss for e in full.report.epochs]
        for k, v in full.model.state().items():
            assert np.array_equal(v, resumed.model.state()[k])


class TestGrid:
    def test_singleton(self, small_split):
        cfg = replace(TINY, max_epochs=1, grid_lr=(0.01,), grid_L_l=(3,), grid_L_s=(3,), grid_layers=(1,),
                      grid_warmup=(2,), grid_patience=(5,))
        best, cells = grid_search(small_split[0], cfg)
        assert len(cells) == 1 and best is cells[0]

    def test_two_by_two(self, small_split):
        cfg = replace(TINY, max_epochs=1, grid_lr=(0.01, 0.005), grid_L_l=(3, 5), grid_L_s=(3,), grid_layers=(1,),
                      grid_warmup=(2,), grid_patience=(5,))
        best, cells = grid_search(small_split[0], cfg)
        assert len(cells) == 4
        assert best.report.best_recall20 == max(c.report.best_recall20 for c in cells)
        assert len({c.config.seed for c in cells}) == 4

    def test_rigged_cell_selected(self):
        cfg = replace(TINY, grid_lr=(0.01, 0.005, 0.001), grid_L_l=(3, 5), grid_L_s=(3,), grid_layers=(1,),
                      grid_warmup=(2,), grid_patience=(5,))
        target = grid_cells(cfg)[4]

        def rigged(split, c):
            good = c.lr == target.lr and c.L_l == target.L_l
            return TrainReport(best_recall20=0.9 if good else 0.1, best_ndcg20=0.5)

        best, _ = grid_search(None, cfg, fit_fn=rigged)
        assert best.index == 4

    def test_ties_prefer_smaller_lr(self):
        cfg = replace(TINY, grid_lr=(0.01, 0.001), grid_L_l=(3,), grid_L_s=(3,), grid_layers=(1,),
                      grid_warmup=(2,), grid_patience=(5,))
        best, _ = grid_search(None, cfg, fit_fn=lambda s, c: TrainReport(best_recall20=0.5, best_ndcg20=0.2))
        assert best.config.lr == 0.001


@pytest.mark.slow
def test_beats_popularity(small_split):
    split = small_split[0]
    cfg = replace(TINY, max_epochs=15, patience=15, L_l=5, L_s=5)
    state = fit(split, cfg)
    idx = ItemUserIndex.build(split.train)
    pop = evaluate(split.valid, popularity_baseline(split, state.model.n_items), split.train, idx,
                   cfg.sampler_config(), cfg.eval_seed)
    assert state.report.best_recall20 > pop.recall[20]
