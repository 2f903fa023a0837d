"""Maximum-likelihood training with Adam, warm-up, early stopping and grid search."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Iterator

import numpy as np

from . import numerics as nx
from .data import DatasetSplit, Session, SessionStore
from .masking import assemble_batch, expand_session
from .metrics import EvalResult, evaluate
from .model import TegaaRec
from .neighbours import ItemUserIndex, SamplerConfig, sample_for_session
from .numerics import AdamState, NumericError
from .tegaa import ModelConfig

log = logging.getLogger(__name__)

GRID_FIELDS = ("lr", "L_l", "L_s", "layers", "warmup", "patience")


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    Adam betas/eps and the flat post-warm-up schedule are not taken from any
    published setting; they are the usual defaults.  ``grid_*`` lists are the
    search space for :func:`grid_search`.
    """

    lr: float = 0.005
    L_l: int = 15
    L_s: int = 25
    layers: int = 1
    warmup: int = 10
    warmup_unit: str = "step"  # or "epoch"
    patience: int = 10
    batch_size: int = 50
    max_epochs: int = 100
    seed: int = 0
    eval_seed: int = 1234
    dim: int = 128
    heads: int = 8
    dropout: float = 0.0
    init_scale: float = 0.1
    max_len: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    eval_prefixes: str = "all"
    neighbour_history: str = "last"
    volume_weighted: bool = False
    no_lmp: bool = False
    no_sf: bool = False
    no_gal: bool = False
    with_pe: bool = False
    no_uli: bool = False
    no_ali: bool = False
    grid_lr: tuple = (0.01, 0.005, 0.0001, 0.00005)
    grid_L_l: tuple = (5, 15, 25)
    grid_L_s: tuple = (25, 50)
    grid_layers: tuple = (1, 3, 5)
    grid_warmup: tuple = (5, 10, 20)
    grid_patience: tuple = (10, 20)

    def __post_init__(self):
        for name in ("L_l", "L_s", "warmup", "patience", "batch_size", "max_epochs", "dim", "heads", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.layers < 0:
            raise ValueError("lr and layers must be non-negative")
        for name in GRID_FIELDS:
            if not getattr(self, "grid_" + name):
                raise ValueError(f"grid_{name} is empty")
        if self.warmup_unit not in ("step", "epoch"):
            raise ValueError(f"warmup_unit must be 'step' or 'epoch', got {self.warmup_unit!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, heads=self.heads, layers=self.layers, dropout=self.dropout,
                           init_scale=self.init_scale, with_pe=self.with_pe, no_uli=self.no_uli or self.no_ali,
                           no_ali=self.no_ali, no_gal=self.no_gal)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.L_l, self.L_s, not self.no_lmp, not self.no_sf, self.volume_weighted,
                             self.neighbour_history, self.max_len)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in known})


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    steps: int
    valid_recall20: float | None = None
    valid_ndcg20: float | None = None


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_recall20: float = -1.0
    best_ndcg20: float = -1.0
    stop_reason: str = ""
    config: dict = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        """Line-delimited JSON: config echo, one record per epoch, then the summary."""
        out = [json.dumps({"type": "config", **self.config}, sort_keys=True)]
        out += [json.dumps({"type": "epoch", **asdict(e)}, sort_keys=True) for e in self.epochs]
        out.append(json.dumps({"type": "summary", "best_epoch": self.best_epoch,
                               "best_recall20": self.best_recall20, "best_ndcg20": self.best_ndcg20,
                               "stop_reason": self.stop_reason}, sort_keys=True))
        return out

    @classmethod
    def from_lines(cls, lines) -> "TrainReport":
        rep = cls()
        for line in lines:
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "config":
                rep.config = rec
            elif kind == "epoch":
                rep.epochs.append(EpochRecord(**rec))
            elif kind == "summary":
                rep.best_epoch, rep.best_recall20 = rec["best_epoch"], rec["best_recall20"]
                rep.best_ndcg20, rep.stop_reason = rec["best_ndcg20"], rec["stop_reason"]
        return rep


def training_sessions(store: SessionStore) -> list[Session]:
    """Sessions that can act as a current session: t >= 2 and at least 2 items."""
    return [s for u in sorted(store.sessions) for s in store.sessions[u] if s.index >= 2 and len(s) >= 2]


def training_instances(store: SessionStore, seed: int, epoch: int) -> Iterator[Session]:
    """Eligible sessions in the shuffled order used for ``epoch``."""
    sessions = training_sessions(store)
    order = np.random.default_rng([seed, epoch]).permutation(len(sessions))
    for k in order:
        yield sessions[k]


def epoch_batches(store: SessionStore, index: ItemUserIndex, config: TrainConfig, epoch: int):
    """Sample neighbours once per session, expand prefixes and chunk into batches."""
    sampler = config.sampler_config()
    rows, samples = [], []
    for j, session in enumerate(training_instances(store, config.seed, epoch)):
        sample = sample_for_session(store, index, session, sampler,
                                    np.random.default_rng([config.seed, epoch, j]))
        subs = expand_session(session)
        rows += subs
        samples += [sample] * len(subs)
    return assemble_batch(rows, samples, config.batch_size, config.max_len)


@dataclass
class TrainerState:
    """Everything needed to continue a run after the last finished epoch."""

    model: TegaaRec
    adam: AdamState
    global_step: int = 0
    epoch: int = 0
    best_state: dict | None = None
    bad_epochs: int = 0
    report: TrainReport = field(default_factory=TrainReport)


def run_epoch(store: SessionStore, index: ItemUserIndex, state: TrainerState, config: TrainConfig) -> float:
    """One pass over the training sessions; returns the mean loss per prediction."""
    epoch = state.epoch + 1
    model, params = state.model, state.model.params
    total, count = 0.0, 0
    for b, batch in enumerate(epoch_batches(store, index, config, epoch)):
        step = state.global_step + 1
        unit = epoch if config.warmup_unit == "epoch" else step
        lr = nx.warmup_lr(unit, config.warmup, config.lr)
        rng = np.random.default_rng([config.seed, epoch, b, 1]) if config.dropout > 0 else None
        nx.reset_tape()
        model.zero_grad()
        loss = model.loss(batch, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:g}")
        nx.backward(loss)
        grads = {k: p.grad for k, p in params.items()}
        if config.grad_clip > 0:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > config.grad_clip:
                grads = {k: g * (config.grad_clip / norm) for k, g in grads.items()}
        nx.adam_step(params, grads, state.adam, lr)
        state.global_step = step
        total += value * len(batch)
        count += len(batch)
    state.epoch = epoch
    return total / count if count else 0.0


def new_state(split: DatasetSplit, config: TrainConfig, n_users: int | None = None,
              n_items: int | None = None) -> TrainerState:
    n_users = n_users if n_users is not None else max(split.train.users) + 1
    n_items = n_items if n_items is not None else max(split.train.items)
    model = TegaaRec(n_users, n_items, config.model_config(), seed=config.seed, max_len=config.max_len)
    return TrainerState(model, AdamState(config.beta1, config.beta2, config.eps),
                        report=TrainReport(config=config.to_dict()))


def validate(split: DatasetSplit, index: ItemUserIndex, model, config: TrainConfig) -> EvalResult | None:
    if not split.valid:
        return None
    return evaluate(split.valid, model, split.train, index, config.sampler_config(), config.eval_seed,
                    eval_prefixes=config.eval_prefixes)


def fit(split: DatasetSplit, config: TrainConfig, state: TrainerState | None = None,
        on_epoch: Callable[[TrainerState], None] | None = None, **sizes) -> TrainerState:
    """Train until validation R@20 stalls for ``patience`` epochs, then restore the best epoch.

    Passing a previously saved ``state`` resumes after its last epoch; since
    every random draw is keyed by (seed, epoch, ...), the continuation matches
    an uninterrupted run.  ``on_epoch`` is called after each epoch.
    """
    state = state or new_state(split, config, **sizes)
    index = ItemUserIndex.build(split.train)
    report = state.report
    while not report.stop_reason:
        if state.epoch >= config.max_epochs:
            report.stop_reason = "max_epochs"
            break
        loss = run_epoch(split.train, index, state, config)
        lr = nx.warmup_lr(state.epoch if config.warmup_unit == "epoch" else max(state.global_step, 1),
                          config.warmup, config.lr)
        rec = EpochRecord(state.epoch, loss, lr, state.global_step)
        res = validate(split, index, state.model, config)
        if res is None:
            state.best_state, report.best_epoch = state.model.state(), state.epoch
        else:
            rec.valid_recall20, rec.valid_ndcg20 = res.recall[20], res.ndcg[20]
            if (res.recall[20], res.ndcg[20]) > (report.best_recall20, report.best_ndcg20):
                report.best_recall20, report.best_ndcg20 = res.recall[20], res.ndcg[20]
                report.best_epoch = state.epoch
                state.best_state = state.model.state()
                state.bad_epochs = 0
            else:
                state.bad_epochs += 1
                if state.bad_epochs >= config.patience:
                    report.stop_reason = "early_stop"
        report.epochs.append(rec)
        log.info("epoch %d loss %.4f lr %.2e R@20 %s", rec.epoch, loss, lr, rec.valid_recall20)
        if on_epoch is not None:
            on_epoch(state)
    if state.best_state is not None:
        state.model.load_state(state.best_state)
    return state


def popularity_baseline(split: DatasetSplit, n_items: int | None = None):
    from .model import PopularityModel
    return PopularityModel.from_store(split.train, n_items or max(split.train.items))


# ---------------------------------------------------------------- grid search

@dataclass
class GridCell:
    index: int
    config: TrainConfig
    report: TrainReport


def grid_cells(config: TrainConfig) -> list[TrainConfig]:
    """Cartesian product of the ``grid_*`` lists, each cell with its own derived seed."""
    space = [getattr(config, "grid_" + name) for name in GRID_FIELDS]
    cells = []
    for k, combo in enumerate(itertools.product(*space)):
        seed = int(np.random.SeedSequence([config.seed, k]).generate_state(1)[0])
        cells.append(replace(config, seed=seed, **dict(zip(GRID_FIELDS, combo))))
    return cells


def grid_search(split: DatasetSplit, config: TrainConfig, fit_fn=None, **sizes) -> tuple[GridCell, list[GridCell]]:
    """Fit every cell; pick the highest validation R@20, then N@20, then the smaller lr."""
    fit_fn = fit_fn or (lambda sp, cfg: fit(sp, cfg, **sizes).report)
    results = [GridCell(k, cell, fit_fn(split, cell)) for k, cell in enumerate(grid_cells(config))]
    best = max(results, key=lambda c: (c.report.best_recall20, c.report.best_ndcg20, -c.config.lr, -c.index))
    return best, results
