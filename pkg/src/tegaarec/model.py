"""The assembled recommender, simple reference scorers, and checkpoint files."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import numerics as nx
from .masking import MaskedBatch, MaskedInstance, assemble_batch, pad_rows
from .neighbours import NeighbourSample
from .numerics import Tensor
from .social import ScoredRanking, aggregate, concat_pool, item_logits
from .tegaa import ModelConfig, init_params, param_shapes, tegaa_encode

CHECKPOINT_MAGIC = b"TEGAAREC-CKPT 1\n"


class CheckpointError(ValueError):
    """A checkpoint is unreadable or does not fit the requested model."""


class TegaaRec:
    """Neighbour-aware next-item model over a fixed user/item vocabulary."""

    kind = "tegaarec"

    def __init__(self, n_users: int, n_items: int, cfg: ModelConfig | None = None,
                 seed: int = 0, params: dict[str, Tensor] | None = None, max_len: int = 50):
        self.n_users, self.n_items = n_users, n_items
        self.cfg = cfg or ModelConfig()
        self.max_len = max_len
        self.params = params if params is not None else init_params(n_users, n_items, self.cfg, seed)

    # ------------------------------------------------------------ forward

    def _neighbour_block(self, samples, rng):
        """Encode each distinct (neighbour, history) once; gather per row."""
        keys: dict[tuple, int] = {}
        rows_items, rows_users = [], []
        per_row = []
        for sample in samples:
            slots = []
            for u in (sample.members if sample is not None else ()):
                items = sample.histories.get(u, ())
                if not items:
                    continue
                key = (u, items)
                if key not in keys:
                    keys[key] = len(rows_users)
                    rows_users.append(u)
                    rows_items.append(items)
                slots.append(keys[key])
            per_row.append(slots)
        m = max((len(s) for s in per_row), default=0)
        if m == 0:
            return None, None
        ids, lengths = pad_rows(rows_items, self.max_len)
        codes = tegaa_encode(rows_users, ids, lengths, self.params, self.cfg,
                             use_user=not self.cfg.no_ali, rng=rng)
        index = np.zeros((len(per_row), m), dtype=np.int64)
        mask = np.zeros((len(per_row), m), dtype=bool)
        for b, slots in enumerate(per_row):
            index[b, :len(slots)] = slots
            mask[b, :len(slots)] = True
        return nx.embedding_lookup(codes, index), mask

    def forward(self, batch: MaskedBatch, rng: np.random.Generator | None = None) -> Tensor:
        """Logits ``[B, V]`` over real items for every row of ``batch``."""
        use_target_user = not (self.cfg.no_uli or self.cfg.no_ali)
        target = tegaa_encode(batch.users, batch.inputs, batch.lengths, self.params, self.cfg,
                              use_user=use_target_user, rng=rng)
        nb, mask = self._neighbour_block(batch.samples, rng)
        if self.cfg.no_gal:
            h = concat_pool(target, nb, self.params, mask)
        else:
            h = aggregate(target, nb, self.params, self.cfg, mask)
        return item_logits(h, self.params["item_emb"])

    def loss(self, batch: MaskedBatch, rng=None) -> Tensor:
        return nx.cross_entropy(self.forward(batch, rng), batch.targets - 1)

    def scores(self, batch: MaskedBatch) -> np.ndarray:
        with nx.no_grad():
            return self.forward(batch).values

    # ------------------------------------------------------------ params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            p.values = np.array(arrays[k], dtype=np.float64)

    def meta(self) -> dict:
        return {"model": self.kind, "n_users": self.n_users, "n_items": self.n_items,
                "max_len": self.max_len, "config": self.cfg.to_dict()}


def forward_instance(model, instance: MaskedInstance, sample: NeighbourSample | None):
    """Rank the catalogue for one prefix; returns (ranking, p(target))."""
    batch = assemble_batch([instance], [sample], 1, getattr(model, "max_len", 50))[0]
    ranking = ScoredRanking(model.scores(batch)[0])
    p = ranking.probabilities[instance.target - 1] if instance.target > 0 else float("nan")
    return ranking, float(p)


class PopularityModel:
    """Scores every item by its training frequency."""

    kind = "popularity"

    def __init__(self, counts: np.ndarray):
        self.counts = np.asarray(counts, dtype=np.float64)
        self.n_items = len(self.counts)

    @classmethod
    def from_store(cls, store, n_items: int) -> "PopularityModel":
        counts = np.zeros(n_items)
        for s in store.all_sessions():
            for i in s.items:
                counts[i - 1] += 1
        return cls(counts)

    def scores(self, batch: MaskedBatch) -> np.ndarray:
        return np.tile(self.counts, (len(batch), 1))

    def state(self):
        return {"counts": self.counts.copy()}

    def meta(self):
        return {"model": self.kind, "n_items": self.n_items}


class OracleModel:
    """Test double that always puts the true target first."""

    kind = "oracle"

    def __init__(self, n_items: int):
        self.n_items = n_items

    def scores(self, batch: MaskedBatch) -> np.ndarray:
        out = np.zeros((len(batch), self.n_items))
        out[np.arange(len(batch)), batch.targets - 1] = 1.0
        return out

    def state(self):
        return {}

    def meta(self):
        return {"model": self.kind, "n_items": self.n_items}


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Magic line, one JSON header line, then raw little-endian float64 blocks."""
    names = sorted(arrays)
    entries, offset = [], 0
    for n in names:
        a = np.ascontiguousarray(arrays[n], dtype="<f8")
        entries.append({"name": n, "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    end = raw.index(b"\n", len(CHECKPOINT_MAGIC))
    header = json.loads(raw[len(CHECKPOINT_MAGIC):end])
    body = memoryview(raw)[end + 1:]
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        a = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"])
        arrays[e["name"]] = a.astype(np.float64)
    return header["meta"], arrays


def save_model(path, model, extra: dict[str, np.ndarray] | None = None, extra_meta: dict | None = None):
    arrays = {f"param.{k}": v for k, v in model.state().items()}
    arrays.update(extra or {})
    meta = dict(model.meta())
    meta.update(extra_meta or {})
    save_checkpoint(path, arrays, meta)


def load_model(path, expect_users: int | None = None, expect_items: int | None = None):
    """Rebuild a model from a checkpoint, rejecting vocabulary or shape mismatches."""
    meta, arrays = read_checkpoint(path)
    kind = meta.get("model")
    n_items = meta.get("n_items")
    if expect_items is not None and n_items != expect_items:
        raise CheckpointError(f"checkpoint has {n_items} items, data has {expect_items}")
    if kind == "oracle":
        return OracleModel(n_items), meta, arrays
    if kind == "popularity":
        return PopularityModel(arrays["param.counts"]), meta, arrays
    if kind != TegaaRec.kind:
        raise CheckpointError(f"unknown model kind {kind!r}")
    if expect_users is not None and meta["n_users"] != expect_users:
        raise CheckpointError(f"checkpoint has {meta['n_users']} users, data has {expect_users}")
    cfg = ModelConfig(**meta["config"])
    shapes = param_shapes(meta["n_users"], n_items, cfg)
    params = {}
    for name, shape in shapes.items():
        a = arrays.get(f"param.{name}")
        if a is None:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        if tuple(a.shape) != tuple(shape):
            raise CheckpointError(f"tensor {name}: checkpoint shape {tuple(a.shape)}, expected {shape}")
        params[name] = Tensor(a, requires_grad=True, name=name)
    model = TegaaRec(meta["n_users"], n_items, cfg, params=params, max_len=meta.get("max_len", 50))
    return model, meta, arrays
